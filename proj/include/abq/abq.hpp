#pragma once

#include <abq/ab_engine.hpp>
#include <abq/autograd.hpp>
#include <abq/blend.hpp>
#include <abq/checkpoint.hpp>
#include <abq/config.hpp>
#include <abq/dataset.hpp>
#include <abq/error.hpp>
#include <abq/experiment.hpp>
#include <abq/int_inference.hpp>
#include <abq/metrics.hpp>
#include <abq/network.hpp>
#include <abq/optim.hpp>
#include <abq/quantizer.hpp>
#include <abq/schedule.hpp>
#include <abq/tensor.hpp>
