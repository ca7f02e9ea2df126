#pragma once

#include <vector>

namespace densemae {

// Interpolating cubic spline with zero second derivative at both ends.
// Knots must be strictly increasing; two knots give the straight line.
// Outside the knot range the spline continues along its end tangents.
class NaturalCubicSpline {
 public:
  NaturalCubicSpline(std::vector<double> knots, std::vector<double> values);

  double operator()(double t) const;
  double derivative(double t) const;

 private:
  std::vector<double> x_, y_, m_;  // m_: second derivatives at the knots
};

}  // namespace densemae
