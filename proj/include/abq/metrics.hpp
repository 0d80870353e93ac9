#pragma once

// Metrics CSV (writer thread + strict reader) and the SVG curve export.

#include <abq/ab_engine.hpp>

#include <algorithm>
#include <cmath>
#include <condition_variable>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace abq {

inline constexpr const char* kMetricsHeader = "step,alpha,loss,acc_w,acc_wq,eff_lr";

/// Fixed textual form so identical runs give byte-identical files.
inline std::string format_metrics_row(const MetricsRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%lld,%.9g,%.9g,%.9g,%.9g,%.9g", static_cast<long long>(r.step), r.alpha, r.loss,
                r.acc_w, r.acc_wq, r.eff_lr);
  return buf;
}

/// Appends rows on a background thread in submission order; the training
/// thread never blocks on disk.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::filesystem::path& path) : out_(path, std::ios::trunc) {
    if (!out_) throw FormatError("cannot write metrics to " + path.string());
    out_ << kMetricsHeader << '\n';
    worker_ = std::thread([this] { drain(); });
  }

  MetricsWriter(const MetricsWriter&) = delete;
  MetricsWriter& operator=(const MetricsWriter&) = delete;

  ~MetricsWriter() { close(); }

  void push(const MetricsRow& row) {
    {
      std::lock_guard lock(mu_);
      queue_.push_back(row);
    }
    cv_.notify_one();
  }

  MetricsSink sink() {
    return [this](const MetricsRow& r) { push(r); };
  }

  /// Flushes every queued row and stops the thread.
  void close() {
    {
      std::lock_guard lock(mu_);
      if (closed_) return;
      closed_ = true;
    }
    cv_.notify_one();
    if (worker_.joinable()) worker_.join();
    out_.flush();
  }

 private:
  void drain() {
    std::unique_lock lock(mu_);
    for (;;) {
      cv_.wait(lock, [this] { return closed_ || !queue_.empty(); });
      while (!queue_.empty()) {
        MetricsRow r = queue_.front();
        queue_.pop_front();
        lock.unlock();
        out_ << format_metrics_row(r) << '\n';
        lock.lock();
      }
      if (closed_) return;
    }
  }

  std::ofstream out_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<MetricsRow> queue_;
  bool closed_ = false;
  std::thread worker_;
};

inline std::vector<MetricsRow> parse_metrics_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw FormatError("metrics CSV is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kMetricsHeader) throw FormatError("metrics CSV header must be '" + std::string(kMetricsHeader) + "'");
  std::vector<MetricsRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() != 6) throw FormatError("metrics CSV line " + std::to_string(lineno) + " has " +
                                             std::to_string(cells.size()) + " fields, expected 6");
    auto num = [&](std::size_t i) {
      try {
        std::size_t pos = 0;
        const double v = std::stod(cells[i], &pos);
        if (pos != cells[i].size()) throw std::invalid_argument(cells[i]);
        return v;
      } catch (const std::exception&) {
        throw FormatError("metrics CSV line " + std::to_string(lineno) + ": bad number '" + cells[i] + "'");
      }
    };
    MetricsRow r;
    const double step = num(0);
    if (step != std::floor(step) || step < 0) throw FormatError("metrics CSV line " + std::to_string(lineno) + ": bad step");
    r.step = static_cast<std::int64_t>(step);
    r.alpha = num(1);
    r.loss = num(2);
    r.acc_w = num(3);
    r.acc_wq = num(4);
    r.eff_lr = num(5);
    if (!rows.empty() && r.step <= rows.back().step)
      throw FormatError("metrics CSV steps must increase (line " + std::to_string(lineno) + ")");
    rows.push_back(r);
  }
  if (rows.empty()) throw FormatError("metrics CSV has no data rows");
  return rows;
}

inline std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_metrics_csv(ss.str());
}

/// Line plot of acc_w, acc_wq and alpha against step. All three live on
/// [0, 1], so they share the y axis. Each series is a <polyline> whose id is
/// the CSV column name.
inline std::string render_curves_svg(const std::vector<MetricsRow>& rows) {
  if (rows.empty()) throw FormatError("no metrics to plot");
  constexpr double W = 640, H = 400, L = 60, R = 20, T = 20, B = 50;
  const double x0 = static_cast<double>(rows.front().step);
  const double x1 = std::max(static_cast<double>(rows.back().step), x0 + 1);
  auto px = [&](double step) { return L + (step - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double v) { return T + (1.0 - std::clamp(v, 0.0, 1.0)) * (H - T - B); };
  auto fmt = [](double v) {
    char b[32];
    std::snprintf(b, sizeof b, "%.2f", v);
    return std::string(b);
  };

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
    << ' ' << H << "\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<g stroke=\"#999\" stroke-width=\"1\">\n";
  s << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\"/>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\"/>\n";
  s << "</g>\n";
  s << "<g font-family=\"sans-serif\" font-size=\"11\" fill=\"#333\">\n";
  for (double v : {0.0, 0.25, 0.5, 0.75, 1.0})
    s << "<text x=\"" << L - 8 << "\" y=\"" << fmt(py(v) + 4) << "\" text-anchor=\"end\">" << v << "</text>\n";
  s << "<text x=\"" << L << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">" << rows.front().step << "</text>\n";
  s << "<text x=\"" << W - R << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">" << rows.back().step
    << "</text>\n";
  s << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\">step</text>\n";
  s << "</g>\n";

  struct Series {
    const char* id;
    const char* color;
    double MetricsRow::*field;
  };
  const Series series[] = {{"acc_w", "#1f77b4", &MetricsRow::acc_w},
                           {"acc_wq", "#d62728", &MetricsRow::acc_wq},
                           {"alpha", "#2ca02c", &MetricsRow::alpha}};
  double ly = T + 10;
  for (const auto& se : series) {
    s << "<polyline id=\"" << se.id << "\" fill=\"none\" stroke=\"" << se.color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (i) s << ' ';
      s << fmt(px(static_cast<double>(rows[i].step))) << ',' << fmt(py(rows[i].*se.field));
    }
    s << "\"/>\n";
    s << "<text x=\"" << W - R - 60 << "\" y=\"" << ly << "\" font-family=\"sans-serif\" font-size=\"11\" fill=\""
      << se.color << "\">" << se.id << "</text>\n";
    ly += 14;
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace abq
