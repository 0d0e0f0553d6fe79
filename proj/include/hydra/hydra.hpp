// Copyright (c) 2026 The hydra-peft authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "hydra/adapter.hpp"
#include "hydra/analysis.hpp"
#include "hydra/autodiff.hpp"
#include "hydra/bench.hpp"
#include "hydra/checkpoint.hpp"
#include "hydra/config.hpp"
#include "hydra/matrix.hpp"
#include "hydra/model.hpp"
#include "hydra/optim.hpp"
#include "hydra/rng.hpp"
#include "hydra/svd.hpp"
#include "hydra/task.hpp"
#include "hydra/train.hpp"
