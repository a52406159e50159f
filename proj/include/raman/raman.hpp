#pragma once

#include "raman/units.hpp"
#include "raman/autodiff.hpp"
#include "raman/adam.hpp"
#include "raman/mlp.hpp"
#include "raman/raman_gain.hpp"
#include "raman/srs_forward.hpp"
#include "raman/srs_bvp.hpp"
#include "raman/io.hpp"
#include "raman/backward_gain.hpp"
#include "raman/link.hpp"
#include "raman/pump_optimizer.hpp"
#include "raman/scenario.hpp"
