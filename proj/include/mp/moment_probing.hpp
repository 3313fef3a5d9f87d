#pragma once

// Umbrella header for the moment probing library.

#include "mp/autodiff.hpp"
#include "mp/backbone.hpp"
#include "mp/data.hpp"
#include "mp/error.hpp"
#include "mp/gradcheck.hpp"
#include "mp/init.hpp"
#include "mp/mp_head.hpp"
#include "mp/ops.hpp"
#include "mp/optim.hpp"
#include "mp/probe_head.hpp"
#include "mp/rng.hpp"
#include "mp/tensor.hpp"
#include "mp/train.hpp"
