// Column-wise discrete Fourier transforms along the sequence axis.
//
// Convention: the forward transform is unnormalized, X_j = sum_t s_t e^{-2 pi i j t / L};
// the inverse carries the 1/L factor. The real transform keeps only the
// non-negative frequency bins (floor(L/2) + 1 of them). The full mode keeps
// all L bins and returns the real part of the inverse.
#pragma once

#include "mbp/autodiff.hpp"

namespace mbp::fft {

enum class Mode { Real, Full };

struct ComplexSpectrum {
  Mat re;
  Mat im;
  Index source_length = 0;

  Index bins() const { return re.rows(); }
  Index cols() const { return re.cols(); }
};

// Number of stored bins for a sequence of length L.
Index bin_count(Index length, Mode mode);

ComplexSpectrum rfft_cols(const Mat& s);
Mat irfft_cols(const ComplexSpectrum& x);

ComplexSpectrum fft_cols(const Mat& s);
Mat ifft_cols_real(const ComplexSpectrum& x);

ComplexSpectrum forward(const Mat& s, Mode mode);
Mat inverse(const ComplexSpectrum& x, Mode mode);

// Adjoints (vector-Jacobian products) of forward/inverse, treating re and im
// as independent real outputs/inputs.
Mat forward_adjoint(const ComplexSpectrum& g, Mode mode);
ComplexSpectrum inverse_adjoint(const Mat& g, Index source_length, Mode mode);

// Differentiable wrappers. The spectrum is returned as two real matrices.
struct SpectrumVars {
  ad::Var re;
  ad::Var im;
};
SpectrumVars forward(ad::Var s, Mode mode);
ad::Var inverse(SpectrumVars x, Index source_length, Mode mode);

}  // namespace mbp::fft
