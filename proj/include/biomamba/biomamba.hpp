// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "biomamba/error.hpp"
#include "biomamba/tensor.hpp"
#include "biomamba/ops.hpp"
#include "biomamba/grad_check.hpp"
#include "biomamba/rng.hpp"
#include "biomamba/param.hpp"
#include "biomamba/scan.hpp"
#include "biomamba/ssm.hpp"
#include "biomamba/baselines.hpp"
#include "biomamba/data/tokenizer.hpp"
#include "biomamba/data/batching.hpp"
#include "biomamba/data/squad.hpp"
#include "biomamba/model.hpp"
#include "biomamba/checkpoint.hpp"
#include "biomamba/train.hpp"
#include "biomamba/eval.hpp"
#include "biomamba/config.hpp"
