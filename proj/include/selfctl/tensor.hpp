#pragma once

#include <Eigen/Core>

namespace selfctl {

/// Dense row-major matrix used for every activation and parameter. Rows are
/// tokens (or batch items); columns are features.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic, Eigen::RowMajor>;

} // namespace selfctl
