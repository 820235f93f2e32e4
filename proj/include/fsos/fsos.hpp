#pragma once

#include "fsos/autodiff.hpp"
#include "fsos/checkpoint.hpp"
#include "fsos/config.hpp"
#include "fsos/data.hpp"
#include "fsos/errors.hpp"
#include "fsos/eval.hpp"
#include "fsos/gradcheck.hpp"
#include "fsos/model.hpp"
#include "fsos/synth.hpp"
#include "fsos/tensor.hpp"
#include "fsos/training.hpp"
