#pragma once

// Flatten a parameter list into a single 1 x N matrix for grad_check, and
// scatter it back.

#include "sida/numkit.hpp"

#include <vector>

namespace test_grad {

inline sida::Matrix flatten(const std::vector<sida::Matrix*>& params) {
    Eigen::Index n = 0;
    for (const auto* p : params) n += p->size();
    sida::Matrix flat(1, n);
    Eigen::Index off = 0;
    for (const auto* p : params) {
        std::copy(p->data(), p->data() + p->size(), flat.data() + off);
        off += p->size();
    }
    return flat;
}

inline void scatter(const sida::Matrix& flat, const std::vector<sida::Matrix*>& params) {
    Eigen::Index off = 0;
    for (auto* p : params) {
        std::copy(flat.data() + off, flat.data() + off + p->size(), p->data());
        off += p->size();
    }
}

}  // namespace test_grad
