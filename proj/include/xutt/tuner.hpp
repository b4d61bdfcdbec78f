#pragma once

// Seeded random search over closed parameter intervals.

#include <cmath>
#include <exception>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "xutt/error.hpp"
#include "xutt/parallel.hpp"
#include "xutt/random.hpp"

namespace xutt {

struct ParamRange {
  std::string name;
  double lo = 0;
  double hi = 0;
};

struct SearchSpace {
  std::vector<ParamRange> ranges;
  std::size_t trials = 64;
  std::uint64_t seed = 0;

  void validate() const {
    if (trials < 1) throw InputError("search needs at least one trial");
    if (ranges.empty()) throw InputError("search space has no parameters");
    for (const auto& r : ranges) {
      if (!(r.lo <= r.hi)) throw InputError("parameter '" + r.name + "': lower bound exceeds upper bound");
    }
  }
};

using ParamSet = std::map<std::string, double>;

/// alpha, insertion bonus and candidate cutoff for shallow fusion.
inline SearchSpace fusion_space(std::size_t trials = 64, std::uint64_t seed = 0) {
  return {{{"alpha", 0.0, 1.0}, {"beta", -0.1, 0.8}, {"cutoff", -12.0, -4.0}}, trials, seed};
}

/// TLM weight and per-token length penalty; the first-pass weight stays 1.
inline SearchSpace rescore_space(std::size_t trials = 64, std::uint64_t seed = 0) {
  return {{{"w_tlm", 0.0, 5.0}, {"length_penalty", -1.0, 1.0}}, trials, seed};
}

struct Trial {
  std::size_t index = 0;
  ParamSet params;
  std::optional<double> value;  // empty when the objective failed
  std::string error;
};

struct SearchOutcome {
  ParamSet best_params;
  double best_value = 0;
  std::size_t best_index = 0;
  std::vector<Trial> trials;  // in index order
};

/// Parameter draws for every trial. Drawn up front so the sequence does not
/// depend on how trials are scheduled.
inline std::vector<ParamSet> sample_trials(const SearchSpace& space) {
  space.validate();
  Rng rng(space.seed);
  std::vector<ParamSet> out(space.trials);
  for (auto& p : out) {
    for (const auto& r : space.ranges) p[r.name] = r.lo + (r.hi - r.lo) * rng.uniform();
  }
  return out;
}

/// Minimizes `objective` over uniform draws. A trial whose objective throws
/// or returns a non-finite value is recorded as failed; the search fails
/// only if every trial does. Ties go to the earliest trial.
inline SearchOutcome random_search(const SearchSpace& space, const std::function<double(const ParamSet&)>& objective,
                                   std::size_t threads = 1) {
  const auto draws = sample_trials(space);
  auto trials = parallel_map(draws.size(), threads, [&](std::size_t i) {
    Trial t{i, draws[i], std::nullopt, {}};
    try {
      const double v = objective(draws[i]);
      if (std::isfinite(v)) {
        t.value = v;
      } else {
        t.error = "objective returned a non-finite value";
      }
    } catch (const std::exception& e) {
      t.error = e.what();
    }
    return t;
  });
  SearchOutcome out;
  std::optional<std::size_t> best;
  for (const auto& t : trials) {
    if (t.value && (!best || *t.value < *trials[*best].value)) best = t.index;
  }
  if (!best) {
    throw SearchError("all " + std::to_string(trials.size()) + " trials failed; first error: " + trials[0].error);
  }
  out.best_index = *best;
  out.best_params = trials[*best].params;
  out.best_value = *trials[*best].value;
  out.trials = std::move(trials);
  return out;
}

/// Running minimum over the log; failed trials repeat the previous value.
inline std::vector<std::optional<double>> best_so_far(const std::vector<Trial>& trials) {
  std::vector<std::optional<double>> out;
  std::optional<double> cur;
  for (const auto& t : trials) {
    if (t.value && (!cur || *t.value < *cur)) cur = t.value;
    out.push_back(cur);
  }
  return out;
}

}  // namespace xutt
