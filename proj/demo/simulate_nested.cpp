// Small null-size study on a balanced nested design.

#include <iostream>

#include "varcomp/varcomp.hpp"

int main() {
  using namespace varcomp;
  ExperimentGrid grid;
  grid.family = DesignFamily::Nested;
  grid.balanced = true;
  grid.sizes = {{10, 3, 2, 0.0}};
  grid.tau_grid = {Vector::Constant(2, 1.0), (Vector(2) << 2.0, 0.25).finished()};
  grid.s = 40;
  grid.b = 49;
  grid.seed = 7;
  power_table(grid, default_workers(), &std::cout);
}
