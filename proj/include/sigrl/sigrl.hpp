#pragma once

#include "sigrl/alignment.hpp"
#include "sigrl/autodiff.hpp"
#include "sigrl/checkpoint.hpp"
#include "sigrl/error.hpp"
#include "sigrl/eval.hpp"
#include "sigrl/feature_io.hpp"
#include "sigrl/gmc.hpp"
#include "sigrl/gradcheck.hpp"
#include "sigrl/gradcheck_suites.hpp"
#include "sigrl/model.hpp"
#include "sigrl/optim.hpp"
#include "sigrl/svfr.hpp"
#include "sigrl/tensor.hpp"
#include "sigrl/trainer.hpp"
