#include "mbp/fft.hpp"

#include <fftw3.h>

#include <complex>
#include <map>
#include <mutex>
#include <stdexcept>
#include <tuple>
#include <vector>

namespace mbp::fft {
namespace {

using cplx = std::complex<double>;

enum class Kind { R2C, C2R, C2CForward, C2CBackward };

// Per-(kind, length, width) plan memo. Plans are created once and executed
// with the new-array interface, which is reentrant.
class PlanCache {
 public:
  static PlanCache& instance() {
    static PlanCache cache;
    return cache;
  }

  fftw_plan get(Kind kind, int length, int width) {
    std::lock_guard lock(mu_);
    const auto key = std::make_tuple(kind, length, width);
    if (auto it = plans_.find(key); it != plans_.end()) return it->second;
    const int n[] = {length};
    const int bins = length / 2 + 1;
    const unsigned flags = FFTW_ESTIMATE | FFTW_UNALIGNED;
    fftw_plan plan = nullptr;
    switch (kind) {
      case Kind::R2C: {
        std::vector<double> in(static_cast<std::size_t>(length * width));
        std::vector<cplx> out(static_cast<std::size_t>(bins * width));
        plan = fftw_plan_many_dft_r2c(1, n, width, in.data(), nullptr, width, 1,
                                      reinterpret_cast<fftw_complex*>(out.data()), nullptr, width, 1, flags);
        break;
      }
      case Kind::C2R: {
        std::vector<cplx> in(static_cast<std::size_t>(bins * width));
        std::vector<double> out(static_cast<std::size_t>(length * width));
        plan = fftw_plan_many_dft_c2r(1, n, width, reinterpret_cast<fftw_complex*>(in.data()), nullptr, width, 1,
                                      out.data(), nullptr, width, 1, flags);
        break;
      }
      case Kind::C2CForward:
      case Kind::C2CBackward: {
        std::vector<cplx> in(static_cast<std::size_t>(length * width));
        std::vector<cplx> out(static_cast<std::size_t>(length * width));
        plan = fftw_plan_many_dft(1, n, width, reinterpret_cast<fftw_complex*>(in.data()), nullptr, width, 1,
                                  reinterpret_cast<fftw_complex*>(out.data()), nullptr, width, 1,
                                  kind == Kind::C2CForward ? FFTW_FORWARD : FFTW_BACKWARD, flags);
        break;
      }
    }
    if (plan == nullptr) throw std::runtime_error("fft: plan creation failed");
    plans_.emplace(key, plan);
    return plan;
  }

  ~PlanCache() {
    for (auto& [key, plan] : plans_) fftw_destroy_plan(plan);
  }

 private:
  std::mutex mu_;
  std::map<std::tuple<Kind, int, int>, fftw_plan> plans_;
};

void check_length(Index length) {
  if (length < 1) throw std::invalid_argument("fft: sequence length must be >= 1");
}

ComplexSpectrum split(const std::vector<cplx>& buf, Index rows, Index cols, Index source_length) {
  ComplexSpectrum out{Mat(rows, cols), Mat(rows, cols), source_length};
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) {
      const cplx& z = buf[static_cast<std::size_t>(r * cols + c)];
      out.re(r, c) = z.real();
      out.im(r, c) = z.imag();
    }
  return out;
}

std::vector<cplx> join(const Mat& re, const Mat& im) {
  std::vector<cplx> buf(static_cast<std::size_t>(re.size()));
  for (Index r = 0; r < re.rows(); ++r)
    for (Index c = 0; c < re.cols(); ++c) buf[static_cast<std::size_t>(r * re.cols() + c)] = {re(r, c), im(r, c)};
  return buf;
}

std::vector<cplx> c2c(const std::vector<cplx>& in, Index length, Index width, Kind kind) {
  std::vector<cplx> out(in.size());
  auto plan = PlanCache::instance().get(kind, static_cast<int>(length), static_cast<int>(width));
  fftw_execute_dft(plan, reinterpret_cast<fftw_complex*>(const_cast<cplx*>(in.data())),
                   reinterpret_cast<fftw_complex*>(out.data()));
  return out;
}

// Unnormalized Hermitian synthesis: s_t = Y_0 + 2 Re sum_{0<j<L/2} Y_j e^{i theta} + [L even] Y_{L/2} (-1)^t.
Mat c2r_raw(const Mat& re, const Mat& im, Index length) {
  check_length(length);
  const Index width = re.cols();
  std::vector<cplx> in = join(re, im);
  // Imaginary parts of the DC and Nyquist bins carry no information for a
  // real signal and are dropped.
  for (Index c = 0; c < width; ++c) {
    in[static_cast<std::size_t>(c)].imag(0.0);
    if (length % 2 == 0) in[static_cast<std::size_t>((length / 2) * width + c)].imag(0.0);
  }
  Mat out(length, width);
  auto plan = PlanCache::instance().get(Kind::C2R, static_cast<int>(length), static_cast<int>(width));
  fftw_execute_dft_c2r(plan, reinterpret_cast<fftw_complex*>(in.data()), out.data());
  return out;
}

}  // namespace

Index bin_count(Index length, Mode mode) { return mode == Mode::Real ? length / 2 + 1 : length; }

ComplexSpectrum rfft_cols(const Mat& s) {
  check_length(s.rows());
  const Index length = s.rows(), width = s.cols();
  const Index bins = length / 2 + 1;
  std::vector<cplx> out(static_cast<std::size_t>(bins * width));
  if (width > 0) {
    auto plan = PlanCache::instance().get(Kind::R2C, static_cast<int>(length), static_cast<int>(width));
    fftw_execute_dft_r2c(plan, const_cast<double*>(s.data()), reinterpret_cast<fftw_complex*>(out.data()));
  }
  return split(out, bins, width, length);
}

Mat irfft_cols(const ComplexSpectrum& x) {
  const Index length = x.source_length;
  if (x.bins() != length / 2 + 1) throw std::invalid_argument("irfft_cols: bin count inconsistent with source length");
  if (x.cols() == 0) return Mat(length, 0);
  return c2r_raw(x.re, x.im, length) / static_cast<double>(length);
}

ComplexSpectrum fft_cols(const Mat& s) {
  check_length(s.rows());
  const Index length = s.rows(), width = s.cols();
  if (width == 0) return {Mat(length, 0), Mat(length, 0), length};
  std::vector<cplx> in(static_cast<std::size_t>(s.size()));
  for (Index i = 0; i < s.size(); ++i) in[static_cast<std::size_t>(i)] = s.data()[i];
  return split(c2c(in, length, width, Kind::C2CForward), length, width, length);
}

Mat ifft_cols_real(const ComplexSpectrum& x) {
  const Index length = x.source_length;
  if (x.bins() != length) throw std::invalid_argument("ifft_cols_real: bin count inconsistent with source length");
  const Index width = x.cols();
  if (width == 0) return Mat(length, 0);
  const auto out = c2c(join(x.re, x.im), length, width, Kind::C2CBackward);
  Mat s(length, width);
  for (Index i = 0; i < s.size(); ++i) s.data()[i] = out[static_cast<std::size_t>(i)].real() / static_cast<double>(length);
  return s;
}

ComplexSpectrum forward(const Mat& s, Mode mode) { return mode == Mode::Real ? rfft_cols(s) : fft_cols(s); }

Mat inverse(const ComplexSpectrum& x, Mode mode) { return mode == Mode::Real ? irfft_cols(x) : ifft_cols_real(x); }

Mat forward_adjoint(const ComplexSpectrum& g, Mode mode) {
  const Index length = g.source_length;
  if (g.cols() == 0) return Mat(length, 0);
  if (mode == Mode::Full) {
    const auto out = c2c(join(g.re, g.im), length, g.cols(), Kind::C2CBackward);
    Mat s(length, g.cols());
    for (Index i = 0; i < s.size(); ++i) s.data()[i] = out[static_cast<std::size_t>(i)].real();
    return s;
  }
  // Re sum_j G_j e^{+i theta} over the stored half spectrum, expressed through
  // the Hermitian synthesis by halving interior bins.
  Mat re = g.re, im = g.im;
  for (Index j = 1; j < g.bins(); ++j) {
    if (2 * j == length) continue;
    re.row(j) *= 0.5;
    im.row(j) *= 0.5;
  }
  return c2r_raw(re, im, length);
}

ComplexSpectrum inverse_adjoint(const Mat& g, Index source_length, Mode mode) {
  if (g.rows() != source_length) throw std::invalid_argument("inverse_adjoint: gradient length mismatch");
  const double inv = 1.0 / static_cast<double>(source_length);
  if (mode == Mode::Full) {
    ComplexSpectrum r = fft_cols(g);
    r.re *= inv;
    r.im *= inv;
    return r;
  }
  ComplexSpectrum r = rfft_cols(g);
  for (Index j = 0; j < r.bins(); ++j) {
    const bool edge = j == 0 || 2 * j == source_length;
    const double c = (edge ? 1.0 : 2.0) * inv;
    r.re.row(j) *= c;
    if (edge)
      r.im.row(j).setZero();
    else
      r.im.row(j) *= c;
  }
  return r;
}

SpectrumVars forward(ad::Var s, Mode mode) {
  ad::Tape& t = *s.tape();
  const int is = s.id();
  ComplexSpectrum x = forward(s.value(), mode);
  const Index length = s.rows();
  // The real-part node is created first, so the reverse sweep reaches it after
  // the imaginary-part node; it consumes both gradients. The imaginary node
  // only makes sure the real node is visited.
  ad::Var re = t.push(std::move(x.re), {is}, [is, length, mode](ad::Tape& t, int self) {
    const int iim = self + 1;
    ComplexSpectrum g{t.grad(self),
                      t.has_grad(iim) ? t.grad(iim) : Mat::Zero(t.value(iim).rows(), t.value(iim).cols()), length};
    t.grad_ref(is) += forward_adjoint(g, mode);
  });
  const int ire = re.id();
  ad::Var im = t.push(std::move(x.im), {is}, [ire](ad::Tape& t, int) { t.grad_ref(ire); });
  return {re, im};
}

ad::Var inverse(SpectrumVars x, Index source_length, Mode mode) {
  ad::Tape& t = *x.re.tape();
  const int ire = x.re.id(), iim = x.im.id();
  ComplexSpectrum spec{x.re.value(), x.im.value(), source_length};
  return t.push(inverse(spec, mode), {ire, iim}, [ire, iim, source_length, mode](ad::Tape& t, int self) {
    ComplexSpectrum g = inverse_adjoint(t.grad(self), source_length, mode);
    if (t.needs_grad(ire)) t.grad_ref(ire) += g.re;
    if (t.needs_grad(iim)) t.grad_ref(iim) += g.im;
  });
}

}  // namespace mbp::fft
