#pragma once

#include "spex/errors.hpp"
#include "spex/numerics.hpp"
#include "spex/kernels.hpp"
#include "spex/nn.hpp"
#include "spex/objectives.hpp"
#include "spex/nesting.hpp"
#include "spex/operator_forms.hpp"
#include "spex/rayleigh_ritz.hpp"
#include "spex/eval.hpp"
#include "spex/trainer.hpp"
#include "spex/config.hpp"
#include "spex/checkpoint.hpp"
#include "spex/csv.hpp"
#include "spex/experiment.hpp"
