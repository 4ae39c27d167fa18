#pragma once

#include "faug/arch.hpp"
#include "faug/attack.hpp"
#include "faug/augment.hpp"
#include "faug/checkpoint.hpp"
#include "faug/cli.hpp"
#include "faug/data.hpp"
#include "faug/error.hpp"
#include "faug/eval.hpp"
#include "faug/experiment.hpp"
#include "faug/model.hpp"
#include "faug/parallel.hpp"
#include "faug/report.hpp"
#include "faug/rng.hpp"
#include "faug/tape.hpp"
#include "faug/tensor.hpp"
#include "faug/train.hpp"
