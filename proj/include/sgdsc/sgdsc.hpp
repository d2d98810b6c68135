#pragma once

#include "sgdsc/error.hpp"
#include "sgdsc/tensor.hpp"
#include "sgdsc/ops_conv.hpp"
#include "sgdsc/ops_nn.hpp"
#include "sgdsc/optim.hpp"
#include "sgdsc/gradcheck.hpp"
#include "sgdsc/snake.hpp"
#include "sgdsc/fusion.hpp"
#include "sgdsc/network.hpp"
#include "sgdsc/metrics.hpp"
#include "sgdsc/hsidata.hpp"
#include "sgdsc/checkpoint.hpp"
#include "sgdsc/trainer.hpp"
#include "sgdsc/synthetic.hpp"
