#pragma once

#include "ccam/adam.hpp"
#include "ccam/adaptation.hpp"
#include "ccam/checkpoint.hpp"
#include "ccam/config.hpp"
#include "ccam/counterfactual.hpp"
#include "ccam/errors.hpp"
#include "ccam/evaluation.hpp"
#include "ccam/gradcheck.hpp"
#include "ccam/image_io.hpp"
#include "ccam/model.hpp"
#include "ccam/ops.hpp"
#include "ccam/rng.hpp"
#include "ccam/synthdata.hpp"
#include "ccam/tensor.hpp"
