// Flat-top transmit-beam synthesis, steered-atom codebooks, and per-block
// reduction-matrix schedules for a hybrid ULA front end.
//
// The synthesizer solves an l1-regularized weighted least-squares fit of the
// array pattern to a two-level magnitude mask,
//
//     minimize  ||w||_1 + gamma * (A^H w - b)^H D (A^H w - b),
//
// with A the array-factor matrix over a uniform angle grid and D a diagonal
// emphasis matrix grown iteratively: angles whose pattern strays from the mask
// accumulate weight, pushing the fixed point toward an equiripple design.
// Iterations follow the accelerated proximal-gradient scheme (soft threshold,
// t-sequence momentum) with a keep-best safeguard so the objective never
// increases between the checkpoints recorded under a common D.
//
// The mask prescribes magnitudes only.  A one-sided aperture (elements
// n = 0..N_a-1) cannot realize a real-valued pattern, so the target is
// referenced to the aperture phase center, b = mask ⊙ exp(-j pi (N_a-1)/2 sin
// theta), and after every reweighting the target phase is refreshed to the
// phase of the current pattern.  This is the standard alternating scheme for
// magnitude fits; with a zero-phase target the magnitude error plateaus an
// order of magnitude higher.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include "otfsradar/array.hpp"
#include "otfsradar/common.hpp"
#include "otfsradar/rng.hpp"

namespace otfsradar {

// ---------------------------------------------------------------------------
// Magnitude mask
// ---------------------------------------------------------------------------

// Two-level magnitude template over an angle grid: a contiguous mainlobe
// section at main_level and a peripheral floor at peripheral_level, scaled so
// that G_m*main_level^2 + G_p*peripheral_level^2 = 1.  Arbitrary nonnegative
// templates may be aggregate-constructed for custom fits; the factory
// guarantees the two-level power convention.
struct BeamMask {
  AngleGrid grid;
  Eigen::VectorXd desired;  // nonnegative magnitude template, one entry per angle
  int main_begin = 0;       // mainlobe index range [main_begin, main_end)
  int main_end = 0;
  double main_level = 0.0;
  double peripheral_level = 0.0;
  double main_center = 0.0;  // designed mainlobe geometry (radians);
  double main_width = 0.0;   // zero when the mask was aggregate-constructed

  int size() const { return static_cast<int>(desired.size()); }
  bool in_main(int g) const { return g >= main_begin && g < main_end; }

  // Mainlobe covering [center - width/2, center + width/2] radians at unit
  // total power; floor_db < 0 sets the peripheral level relative to the
  // mainlobe level.
  static BeamMask flat_top(const AngleGrid& grid, double center, double width,
                           double floor_db) {
    if (width <= 0.0) throw ConfigError("BeamMask: width must be positive");
    if (floor_db >= 0.0)
      throw ConfigError(
          "BeamMask: peripheral floor must sit below the mainlobe level "
          "(floor_db < 0)");
    const int g_count = grid.size();
    int begin = -1, end = -1;
    for (int g = 0; g < g_count; ++g) {
      const bool inside = std::abs(grid.angle(g) - center) <= width / 2.0;
      if (inside && begin < 0) begin = g;
      if (inside) end = g + 1;
    }
    if (begin < 0)
      throw ConfigError("BeamMask: mainlobe section contains no grid angles");
    const double ratio = db_to_amplitude(floor_db);
    const double g_m = static_cast<double>(end - begin);
    const double g_p = static_cast<double>(g_count) - g_m;
    const double sigma_m = 1.0 / std::sqrt(g_m + g_p * ratio * ratio);
    const double sigma_p = sigma_m * ratio;
    BeamMask mask;
    mask.grid = grid;
    mask.desired = Eigen::VectorXd::Constant(g_count, sigma_p);
    mask.desired.segment(begin, end - begin).setConstant(sigma_m);
    mask.main_begin = begin;
    mask.main_end = end;
    mask.main_level = sigma_m;
    mask.peripheral_level = sigma_p;
    mask.main_center = center;
    mask.main_width = width;
    return mask;
  }

  void validate() const {
    if (desired.size() != grid.size())
      throw ConfigError("BeamMask: template length must match the angle grid");
    if (desired.minCoeff() < 0.0)
      throw ConfigError("BeamMask: magnitude template must be nonnegative");
    if (!(main_level > peripheral_level) || peripheral_level < 0.0)
      throw ConfigError(
          "BeamMask: levels must satisfy main_level > peripheral_level >= 0");
    const double g_m = static_cast<double>(main_end - main_begin);
    const double g_p = static_cast<double>(size()) - g_m;
    const double power =
        g_m * main_level * main_level + g_p * peripheral_level * peripheral_level;
    if (std::abs(power - 1.0) > 1e-9)
      throw ConfigError("BeamMask: levels must carry unit total power");
  }

 private:
  static double db_to_amplitude(double v_db) { return std::pow(10.0, v_db / 20.0); }
};

// ---------------------------------------------------------------------------
// Accelerated proximal-gradient synthesis
// ---------------------------------------------------------------------------

struct FistaParams {
  double gamma = 1e4;       // fit weight against the l1 term
  double tau_step = 0.0;    // fixed step 1/tau; 0 selects 1/(2 gamma lambda_max(A D A^H))
  double epsilon_frac = 0.02;  // mainlobe dead zone as a fraction of the main level
  double k_main = 0.007;    // mainlobe emphasis growth rate
  double k_peri = 0.005;    // peripheral overshoot growth rate
  int max_iter = 2000;
  double tol = 1e-8;        // relative same-emphasis objective decrease
};

// Consecutive quiet iterations required before synth_fista declares
// convergence; a single sub-tol step can be a transient plateau of the
// descent/target-refresh alternation rather than a fixed point.
inline constexpr int kQuietStreak = 25;

// Fresh shuffled attempts per block before build_schedule declares a
// flat_top layout infeasible.
inline constexpr int kScheduleRestarts = 64;

// Complex soft threshold: magnitudes shrink by alpha, phases are preserved,
// entries at or below alpha collapse to zero.
inline Eigen::VectorXcd shrink(const Eigen::VectorXcd& v, double alpha) {
  Eigen::VectorXcd out(v.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    const double mag = std::abs(v[i]);
    out[i] = (mag > alpha) ? v[i] * ((mag - alpha) / mag) : cplx(0.0, 0.0);
  }
  return out;
}

struct SynthesisResult {
  Eigen::VectorXcd weights;  // power-normalized over the synthesis grid
  bool converged = false;
  int iterations = 0;
  // Objective value (before, after) for each iterate update, both evaluated
  // under the emphasis matrix and target in effect for that update.
  std::vector<std::pair<double, double>> checkpoints;
};

// Scales f so that ||A^H f|| = 1, i.e. unit radiated power over the grid.
inline Eigen::VectorXcd normalize_power(const Eigen::VectorXcd& f,
                                        const Eigen::MatrixXcd& a_mat) {
  const double norm = (a_mat.adjoint() * f).norm();
  if (norm <= 0.0)
    throw ConfigError("normalize_power: cannot normalize an all-zero beam");
  return f / norm;
}

inline Eigen::VectorXd pattern_of(const Eigen::VectorXcd& f,
                                  const Eigen::MatrixXcd& a_mat) {
  return (a_mat.adjoint() * f).cwiseAbs();
}

// |a(theta)^H f| at a single off-grid angle.
inline double pattern_at(const Eigen::VectorXcd& f, double theta) {
  const int n = static_cast<int>(f.size());
  return std::abs(steering_vector(theta, n).dot(f));
}

inline SynthesisResult synth_fista(const BeamMask& mask, int num_antennas,
                                   const FistaParams& params = {}) {
  if (params.gamma <= 0.0)
    throw ConfigError("synth_fista: gamma must be positive");
  if (mask.desired.size() != mask.grid.size())
    throw ConfigError("synth_fista: mask template must match its angle grid");
  const int g_count = mask.size();
  const Eigen::MatrixXcd a_mat = array_factor_matrix(mask.grid, num_antennas);
  const Eigen::VectorXd b_mag = mask.desired;

  // Magnitude target referenced to the aperture phase center.
  Eigen::VectorXcd phase_ref(g_count);
  for (int g = 0; g < g_count; ++g)
    phase_ref[g] = expj(-kPi * (num_antennas - 1) / 2.0 * std::sin(mask.grid.angle(g)));
  Eigen::VectorXcd b = b_mag.cast<cplx>().cwiseProduct(phase_ref);

  Eigen::VectorXd emphasis = Eigen::VectorXd::Ones(g_count);
  const double eps = params.epsilon_frac * std::max(mask.main_level, 1e-300);
  const double level = std::max(mask.main_level, 1e-300);

  // Unweighted least-squares start.
  Eigen::VectorXcd w = Eigen::MatrixXcd(a_mat.adjoint())
                           .colPivHouseholderQr()
                           .solve(b);
  if (b_mag.maxCoeff() == 0.0) w.setZero();
  Eigen::VectorXcd y = w;
  double t = 1.0;

  const auto objective = [&](const Eigen::VectorXcd& x) {
    const Eigen::VectorXcd r = a_mat.adjoint() * x - b;
    return x.lpNorm<1>() +
           params.gamma * (r.conjugate().cwiseProduct(emphasis.cast<cplx>())
                               .cwiseProduct(r))
                              .sum()
                              .real();
  };

  SynthesisResult result;
  result.checkpoints.reserve(static_cast<size_t>(params.max_iter));
  int quiet_streak = 0;
  for (int iter = 0; iter < params.max_iter; ++iter) {
    double step = params.tau_step > 0.0 ? 1.0 / params.tau_step : 0.0;
    if (step == 0.0) {
      const Eigen::MatrixXcd m =
          a_mat * emphasis.asDiagonal() * a_mat.adjoint();
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(m,
                                                         Eigen::EigenvaluesOnly);
      const double lam = es.eigenvalues().maxCoeff();
      step = 1.0 / (2.0 * params.gamma * std::max(lam, 1e-300));
    }

    const Eigen::VectorXcd resid = a_mat.adjoint() * y - b;
    const Eigen::VectorXcd grad =
        2.0 * params.gamma * (a_mat * emphasis.cast<cplx>().cwiseProduct(resid));
    const Eigen::VectorXcd cand = shrink(y - step * grad, step);

    const double t_next = (1.0 + std::sqrt(1.0 + 4.0 * t * t)) / 2.0;
    const double pre = objective(w);
    const double cand_obj = objective(cand);
    const bool accepted = cand_obj <= pre;
    const Eigen::VectorXcd w_next = accepted ? cand : w;
    const double post = std::min(cand_obj, pre);
    result.checkpoints.emplace_back(pre, post);

    y = w_next + ((t - 1.0) / t_next) * (w_next - w);
    w = w_next;
    t = t_next;
    result.iterations = iter + 1;

    // Emphasis growth: mainlobe angles outside the dead zone and peripheral
    // angles overshooting the mask accumulate weight (never decreasing).
    const Eigen::VectorXcd pattern = a_mat.adjoint() * w;
    Eigen::VectorXd add = Eigen::VectorXd::Zero(g_count);
    for (int g = 0; g < g_count; ++g) {
      if (mask.in_main(g)) {
        const double r_fit = std::abs(pattern[g] - b[g]);
        if (r_fit >= eps) add[g] = params.k_main * r_fit / level;
      } else {
        const double over = std::abs(pattern[g]) - b_mag[g];
        add[g] = std::max(0.0, params.k_peri * over / level);
      }
    }
    emphasis += add;

    // Refresh the target phase to the current pattern (magnitude fit).
    double target_shift = 0.0;
    for (int g = 0; g < g_count; ++g) {
      const double mag = std::abs(pattern[g]);
      if (mag > 0.0) {
        const cplx refreshed = b_mag[g] * (pattern[g] / mag);
        target_shift += std::norm(refreshed - b[g]);
        b[g] = refreshed;
      }
    }
    target_shift = std::sqrt(target_shift) / std::max(b_mag.norm(), 1e-300);

    // Converged only after a sustained run of accepted steps that improve by
    // less than tol while the emphasis matrix and the refreshed target have
    // both stopped moving.  The alternation between descent and target
    // refresh passes through transient plateaus where a single iteration
    // satisfies all of these momentarily, so one quiet iteration is not
    // proof of a fixed point; a rejected candidate or any residual target
    // motion resets the streak.
    const double rel_drop = (pre - post) / std::max(std::abs(pre), 1e-300);
    const bool quiet = accepted && rel_drop < params.tol &&
                       add.maxCoeff() <= 0.0 && target_shift < 1e-9;
    quiet_streak = quiet ? quiet_streak + 1 : 0;
    if (quiet_streak >= kQuietStreak) {
      result.converged = true;
      break;
    }
  }

  if (b_mag.maxCoeff() == 0.0 || w.norm() == 0.0) {
    result.weights = w;  // all-zero mask keeps the all-zero minimizer
    return result;
  }
  result.weights = normalize_power(w, a_mat);
  return result;
}

// ---------------------------------------------------------------------------
// Pattern quality measurement
// ---------------------------------------------------------------------------

// Ripple and sidelobe level of a synthesized beam against its mask.  A
// physical aperture rolls off over roughly one Rayleigh width (2/N_a in sine
// space); a two-level mask has no transition band, so the flat region is the
// mainlobe shrunk by that width on each side and the sidelobe region starts
// the same width past the mainlobe edge.  Evaluation runs on an oversampled
// grid to catch excursions between synthesis angles.
struct PatternQuality {
  double ripple_db = 0.0;  // max - min over the flat region
  double sll_db = 0.0;     // highest sidelobe relative to the flat-region peak
  double peak_db = 0.0;
};

inline PatternQuality pattern_quality(const Eigen::VectorXcd& f,
                                      const BeamMask& mask,
                                      double transition_sin = -1.0,
                                      int oversample = 4) {
  const int n = static_cast<int>(f.size());
  if (transition_sin < 0.0) transition_sin = 2.0 / n;
  const bool designed = mask.main_width > 0.0;
  const double lo = std::sin(designed ? mask.main_center - mask.main_width / 2.0
                                      : mask.grid.angle(mask.main_begin));
  const double hi = std::sin(designed ? mask.main_center + mask.main_width / 2.0
                                      : mask.grid.angle(mask.main_end - 1));
  const int g_eval = mask.grid.size() * oversample;
  double flat_max = -1e300, flat_min = 1e300, side_max = -1e300;
  for (int g = 0; g < g_eval; ++g) {
    const double theta = -kPi / 2.0 + kPi * g / g_eval;
    const double u = std::sin(theta);
    const double p_db = 20.0 * std::log10(std::max(pattern_at(f, theta), 1e-12));
    if (u >= lo + transition_sin && u <= hi - transition_sin) {
      flat_max = std::max(flat_max, p_db);
      flat_min = std::min(flat_min, p_db);
    } else if (u <= lo - transition_sin || u >= hi + transition_sin) {
      side_max = std::max(side_max, p_db);
    }
  }
  PatternQuality q;
  q.peak_db = flat_max;
  q.ripple_db = flat_max - flat_min;
  q.sll_db = side_max - flat_max;
  return q;
}

// ---------------------------------------------------------------------------
// Steered-atom codebook
// ---------------------------------------------------------------------------

// Element-wise steering shifts the pattern in sine space: the product
// f0 ⊙ a(theta_c) evaluated through a(theta)^H places the fundamental
// pattern at sin(theta) - sin(theta_c).
inline Eigen::VectorXcd steer_atom(const Eigen::VectorXcd& f0, double theta_c) {
  const int n = static_cast<int>(f0.size());
  return f0.cwiseProduct(steering_vector(theta_c, n));
}

struct Codebook {
  std::vector<Eigen::VectorXcd> atoms;  // row-major over (coarse, fine)
  std::vector<double> centers;          // beam center per atom, radians
  double theta_min = 0.0, theta_max = 0.0;
  double coarse_step = 0.0, fine_step = 0.0;
  int coarse_count = 0, fine_count = 0;

  int size() const { return static_cast<int>(atoms.size()); }
  const Eigen::VectorXcd& atom(int coarse, int fine) const {
    return atoms.at(static_cast<size_t>(coarse) * fine_count + fine);
  }
  double center(int coarse, int fine) const {
    return centers.at(static_cast<size_t>(coarse) * fine_count + fine);
  }
};

// Steers a boresight fundamental beam across [theta_min, theta_max] on a
// coarse/fine lattice of beam centers theta_min + i*coarse_step + j*fine_step.
inline Codebook build_codebook(double theta_min, double theta_max,
                               double coarse_step, double fine_step,
                               const Eigen::VectorXcd& f0,
                               const AngleGrid& grid) {
  if (!(theta_max > theta_min))
    throw ConfigError("build_codebook: empty field of view");
  if (coarse_step <= 0.0 || fine_step <= 0.0)
    throw ConfigError("build_codebook: angular steps must be positive");
  const double span = theta_max - theta_min;
  const double n_coarse = span / coarse_step;
  const double n_fine = coarse_step / fine_step;
  if (std::abs(n_coarse - std::round(n_coarse)) > 1e-9)
    throw ConfigError(
        "build_codebook: field of view must be an integer number of coarse steps");
  if (std::abs(n_fine - std::round(n_fine)) > 1e-9)
    throw ConfigError(
        "build_codebook: coarse step must be an integer number of fine steps");
  Codebook cb;
  cb.theta_min = theta_min;
  cb.theta_max = theta_max;
  cb.coarse_step = coarse_step;
  cb.fine_step = fine_step;
  cb.coarse_count = static_cast<int>(std::llround(n_coarse));
  cb.fine_count = static_cast<int>(std::llround(n_fine));
  const Eigen::MatrixXcd a_mat =
      array_factor_matrix(grid, static_cast<int>(f0.size()));
  for (int i = 0; i < cb.coarse_count; ++i) {
    for (int j = 0; j < cb.fine_count; ++j) {
      const double theta_c = theta_min + i * coarse_step + j * fine_step;
      cb.atoms.push_back(normalize_power(steer_atom(f0, theta_c), a_mat));
      cb.centers.push_back(theta_c);
    }
  }
  return cb;
}

// ---------------------------------------------------------------------------
// Reduction-matrix schedules
// ---------------------------------------------------------------------------

enum class ReductionStrategy { FlatTop, Dft, AntennaSelection };

inline ReductionStrategy parse_strategy(const std::string& name) {
  if (name == "flat_top") return ReductionStrategy::FlatTop;
  if (name == "dft") return ReductionStrategy::Dft;
  if (name == "antenna_selection") return ReductionStrategy::AntennaSelection;
  throw ConfigError("unknown reduction strategy '" + name +
                    "' (expected flat_top, dft, or antenna_selection)");
}

inline std::string to_string(ReductionStrategy s) {
  switch (s) {
    case ReductionStrategy::FlatTop: return "flat_top";
    case ReductionStrategy::Dft: return "dft";
    case ReductionStrategy::AntennaSelection: return "antenna_selection";
  }
  return "?";
}

struct ReductionSchedule {
  std::vector<Eigen::MatrixXcd> matrices;  // B matrices, N_a x N_rf, unit-l2 columns
  ReductionStrategy strategy = ReductionStrategy::FlatTop;
  std::uint64_t seed = 0;
  // flat_top: codebook atom index behind each column; empty for baselines.
  std::vector<std::vector<int>> atom_indices;

  int blocks() const { return static_cast<int>(matrices.size()); }
};

namespace detail {

// Deals indices from [0, pool_size) in seeded shuffled batches, never
// repeating an index within one block.
class ShuffledDealer {
 public:
  ShuffledDealer(int pool_size, Rng& rng) : pool_size_(pool_size), rng_(rng) {}

  std::vector<int> deal_block(int count) {
    std::vector<int> block;
    block.reserve(count);
    while (static_cast<int>(block.size()) < count) {
      if (pool_.empty()) refill(block);
      const int idx = pool_.back();
      pool_.pop_back();
      if (std::find(block.begin(), block.end(), idx) == block.end())
        block.push_back(idx);
    }
    return block;
  }

 private:
  void refill(const std::vector<int>& exclude) {
    pool_.clear();
    for (int i = 0; i < pool_size_; ++i)
      if (std::find(exclude.begin(), exclude.end(), i) == exclude.end())
        pool_.push_back(i);
    rng_.shuffle(pool_);
  }
  int pool_size_;
  Rng& rng_;
  std::vector<int> pool_;
};

}  // namespace detail

// Builds the per-block reduction matrices.
//   flat_top: greedily draws codebook atoms per block, preferring beam
//     centers not yet used in earlier blocks, subject to a pairwise coupling
//     bound eps_orth within each block.
//   dft: columns of the N_a-point unitary DFT, dealt in seeded shuffled
//     batches, distinct within each block.
//   antenna_selection: identity columns dealt the same way.
// Columns are unit-l2 so reduction leaves the per-chain noise variance
// untouched.
inline ReductionSchedule build_schedule(const Codebook& cb, int num_antennas,
                                        int num_blocks, int n_rf,
                                        ReductionStrategy strategy,
                                        std::uint64_t seed,
                                        double eps_orth = 0.1) {
  if (num_blocks < 1 || n_rf < 1)
    throw ConfigError("build_schedule: need at least one block and one chain");
  ReductionSchedule sched;
  sched.strategy = strategy;
  sched.seed = seed;
  Rng rng(derive_seed(seed, 0x5ced51eu, static_cast<std::uint64_t>(strategy), 0));

  if (strategy == ReductionStrategy::Dft ||
      strategy == ReductionStrategy::AntennaSelection) {
    if (n_rf > num_antennas)
      throw ConfigError(
          "build_schedule: cannot draw more distinct columns than antennas");
    Eigen::MatrixXcd dft(num_antennas, num_antennas);
    for (int r = 0; r < num_antennas; ++r)
      for (int c = 0; c < num_antennas; ++c)
        dft(r, c) = expj(-2.0 * kPi * r * c / num_antennas) /
                    std::sqrt(static_cast<double>(num_antennas));
    detail::ShuffledDealer dealer(num_antennas, rng);
    for (int b = 0; b < num_blocks; ++b) {
      Eigen::MatrixXcd u = Eigen::MatrixXcd::Zero(num_antennas, n_rf);
      const std::vector<int> cols = dealer.deal_block(n_rf);
      for (int s = 0; s < n_rf; ++s) {
        if (strategy == ReductionStrategy::Dft)
          u.col(s) = dft.col(cols[s]);
        else
          u(cols[s], s) = 1.0;
      }
      sched.matrices.push_back(std::move(u));
    }
    return sched;
  }

  // flat_top
  if (cb.size() == 0)
    throw ConfigError("build_schedule: flat_top needs a non-empty codebook");
  if (n_rf > cb.size())
    throw ConfigError("build_schedule: more chains than codebook atoms");
  if (static_cast<int>(cb.atoms.front().size()) != num_antennas)
    throw ConfigError("build_schedule: codebook atoms do not match the array size");
  std::vector<Eigen::VectorXcd> unit_atoms;
  unit_atoms.reserve(cb.size());
  for (const auto& atom : cb.atoms) unit_atoms.push_back(atom.normalized());
  // Atom coupling is not monotonic in beam-center separation, so a greedy
  // draw can paint itself into a corner that a different draw order avoids.
  // Each block therefore gets several fresh shuffled attempts before the
  // layout is declared infeasible.  Retries only consume extra generator
  // draws inside the failing block, so a schedule of B blocks remains a
  // prefix of any longer schedule built from the same seed.
  std::set<int> used_centers;
  for (int b = 0; b < num_blocks; ++b) {
    std::vector<int> chosen;
    std::string fail_msg;
    bool built = false;
    for (int attempt = 0; attempt < kScheduleRestarts && !built; ++attempt) {
      chosen.clear();
      built = true;
      for (int slot = 0; slot < n_rf; ++slot) {
        std::vector<int> order(cb.size());
        std::iota(order.begin(), order.end(), 0);
        rng.shuffle(order);
        const auto coupling_ok = [&](int idx, int* worst_partner,
                                     double* worst_val) {
          bool ok = true;
          for (int j : chosen) {
            const double c = std::abs(unit_atoms[idx].dot(unit_atoms[j]));
            if (c > eps_orth) {
              ok = false;
              if (worst_val != nullptr && c > *worst_val) {
                *worst_val = c;
                *worst_partner = j;
              }
            }
          }
          return ok;
        };
        int pick = -1;
        for (int idx : order) {
          if (used_centers.count(idx) == 0 &&
              std::find(chosen.begin(), chosen.end(), idx) == chosen.end() &&
              coupling_ok(idx, nullptr, nullptr)) {
            pick = idx;
            break;
          }
        }
        if (pick < 0) {
          for (int idx : order) {
            if (std::find(chosen.begin(), chosen.end(), idx) == chosen.end() &&
                coupling_ok(idx, nullptr, nullptr)) {
              pick = idx;
              break;
            }
          }
        }
        if (pick < 0) {
          // Remember the least-coupled infeasible candidate for the report.
          double best_worst = 1e300;
          int best_idx = -1, best_partner = -1;
          for (int idx : order) {
            if (std::find(chosen.begin(), chosen.end(), idx) != chosen.end())
              continue;
            int partner = -1;
            double worst = 0.0;
            coupling_ok(idx, &partner, &worst);
            if (worst < best_worst) {
              best_worst = worst;
              best_idx = idx;
              best_partner = partner;
            }
          }
          fail_msg = "build_schedule: block " + std::to_string(b) +
                     " cannot fit " + std::to_string(n_rf) + " atoms; atoms " +
                     std::to_string(best_idx) + " and " +
                     std::to_string(best_partner) + " couple at " +
                     std::to_string(best_worst) + " > eps_orth = " +
                     std::to_string(eps_orth);
          built = false;
          break;
        }
        chosen.push_back(pick);
      }
    }
    if (!built) throw ConfigError(fail_msg);
    for (int idx : chosen) used_centers.insert(idx);
    Eigen::MatrixXcd u(num_antennas, n_rf);
    for (int s = 0; s < n_rf; ++s) u.col(s) = unit_atoms[chosen[s]];
    sched.matrices.push_back(std::move(u));
    sched.atom_indices.push_back(std::move(chosen));
  }
  return sched;
}

}  // namespace otfsradar
