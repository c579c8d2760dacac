#pragma once

#include "datn/attention.hpp"
#include "datn/checkpoint.hpp"
#include "datn/config.hpp"
#include "datn/corpus.hpp"
#include "datn/eval.hpp"
#include "datn/grad_check.hpp"
#include "datn/graph.hpp"
#include "datn/model.hpp"
#include "datn/optim.hpp"
#include "datn/sparsemax.hpp"
#include "datn/tensor.hpp"
#include "datn/train.hpp"
