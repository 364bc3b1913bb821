#pragma once

#include "piip/checkpoint.hpp"
#include "piip/common.hpp"
#include "piip/config.hpp"
#include "piip/configfile.hpp"
#include "piip/cost.hpp"
#include "piip/cost_model.hpp"
#include "piip/gradcheck.hpp"
#include "piip/interaction.hpp"
#include "piip/merge.hpp"
#include "piip/model.hpp"
#include "piip/ops.hpp"
#include "piip/sweep.hpp"
#include "piip/tensor.hpp"
#include "piip/train.hpp"
#include "piip/vit.hpp"

namespace piip {}
