#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>
#include <vector>

namespace hiermem {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Thrown when an operation receives input that violates its preconditions.
class InputError : public std::invalid_argument {
public:
    explicit InputError(const std::string& what) : std::invalid_argument(what) {}
};

inline void require(bool cond, const std::string& what) {
    if (!cond) throw InputError(what);
}

inline bool all_finite(const Vec& v) { return v.allFinite(); }

}  // namespace hiermem
