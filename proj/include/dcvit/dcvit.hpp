// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "dcvit/binio.hpp"
#include "dcvit/checkpoint.hpp"
#include "dcvit/compress.hpp"
#include "dcvit/compressor.hpp"
#include "dcvit/dataset.hpp"
#include "dcvit/error.hpp"
#include "dcvit/hash.hpp"
#include "dcvit/losses.hpp"
#include "dcvit/ops.hpp"
#include "dcvit/optim.hpp"
#include "dcvit/pipeline.hpp"
#include "dcvit/planner.hpp"
#include "dcvit/rng.hpp"
#include "dcvit/synth.hpp"
#include "dcvit/tape.hpp"
#include "dcvit/tensor.hpp"
#include "dcvit/train.hpp"
#include "dcvit/vit.hpp"
