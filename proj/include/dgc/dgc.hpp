// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "dgc/bench.hpp"
#include "dgc/checkpoint.hpp"
#include "dgc/config.hpp"
#include "dgc/dataset.hpp"
#include "dgc/dgc_layer.hpp"
#include "dgc/global_threshold.hpp"
#include "dgc/index_plan.hpp"
#include "dgc/mac.hpp"
#include "dgc/metrics.hpp"
#include "dgc/model.hpp"
#include "dgc/ops.hpp"
#include "dgc/optim.hpp"
#include "dgc/parallel.hpp"
#include "dgc/schedule.hpp"
#include "dgc/tensor.hpp"
#include "dgc/trainer.hpp"
#include "dgc/visualize.hpp"
