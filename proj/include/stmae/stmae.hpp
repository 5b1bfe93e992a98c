#pragma once

#include "stmae/checkpoint.hpp"
#include "stmae/config.hpp"
#include "stmae/error.hpp"
#include "stmae/grid.hpp"
#include "stmae/masking.hpp"
#include "stmae/model.hpp"
#include "stmae/ops.hpp"
#include "stmae/perf.hpp"
#include "stmae/rng.hpp"
#include "stmae/tensor.hpp"
#include "stmae/tokenizer.hpp"
#include "stmae/trainer.hpp"
#include "stmae/video.hpp"
#include "stmae/visualize.hpp"
