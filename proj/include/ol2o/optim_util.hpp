#pragma once

// Small shared helpers for gradient-based training loops.

#include "numerics.hpp"

namespace ol2o::detail {

// View over one learnable array (matrix or scalar) plus its Adam moments.
struct Slot {
    DenseMatrix* mat = nullptr;
    double* sc = nullptr;
    DenseMatrix am, av;

    void reset_moments() {
        const index_t r = mat ? mat->rows : 1;
        const index_t c = mat ? mat->cols : 1;
        am = DenseMatrix(r, c, 0.0);
        av = DenseMatrix(r, c, 0.0);
    }
};

inline void adam_update(Slot& s, const DenseMatrix& g, double lr, long t,
                        double b1 = 0.9, double b2 = 0.999, double eps = 1e-8) {
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t));
    const index_t count = s.mat ? s.mat->size() : 1;
    for (index_t i = 0; i < count; ++i) {
        const double gi = g.data[i];
        s.am.data[i] = b1 * s.am.data[i] + (1 - b1) * gi;
        s.av.data[i] = b2 * s.av.data[i] + (1 - b2) * gi * gi;
        const double mhat = s.am.data[i] / bc1;
        const double vhat = s.av.data[i] / bc2;
        const double delta = lr * mhat / (std::sqrt(vhat) + eps);
        if (s.mat)
            s.mat->data[i] -= delta;
        else
            *s.sc -= delta;
    }
}

}  // namespace ol2o::detail
