#pragma once

#include "varcomp/error.hpp"
#include "varcomp/decomp.hpp"
#include "varcomp/model.hpp"
#include "varcomp/likelihood.hpp"
#include "varcomp/optimizer.hpp"
#include "varcomp/rng.hpp"
#include "varcomp/parallel.hpp"
#include "varcomp/bootstrap.hpp"
#include "varcomp/designs.hpp"
#include "varcomp/simharness.hpp"
