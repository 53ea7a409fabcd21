#pragma once

// Independent reference computations for the tests. They follow the written
// formulas site by site in long double and share no code with the library.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iterator>
#include <optional>
#include <set>
#include <vector>

#include "condist/numerics.hpp"
#include "condist/rng.hpp"

namespace oracle {

using ld = long double;

struct Field {
  std::size_t batch = 0, channels = 0, sites = 0;
  std::vector<ld> v;  // [b][c][s]
  ld& at(std::size_t b, std::size_t c, std::size_t s) { return v[(b * channels + c) * sites + s]; }
  ld at(std::size_t b, std::size_t c, std::size_t s) const {
    return v[(b * channels + c) * sites + s];
  }
};

inline Field from_tensor(const condist::Tensor& t) {
  Field f;
  f.batch = t.shape()[0];
  f.channels = t.shape()[1];
  f.sites = t.size() / (f.batch * f.channels);
  for (double x : t.values()) f.v.push_back(x);
  return f;
}

inline Field softmax(const Field& z, ld tau) {
  Field p = z;
  for (std::size_t b = 0; b < z.batch; ++b) {
    for (std::size_t s = 0; s < z.sites; ++s) {
      ld denom = 0;
      for (std::size_t c = 0; c < z.channels; ++c) denom += std::exp(z.at(b, c, s) / tau);
      for (std::size_t c = 0; c < z.channels; ++c) p.at(b, c, s) = std::exp(z.at(b, c, s) / tau) / denom;
    }
  }
  return p;
}

// Channel-averaged batch Dice loss, squared denominator.
inline ld dice_loss(const Field& p, const Field& q, ld eps) {
  ld total = 0;
  for (std::size_t c = 0; c < p.channels; ++c) {
    ld inter = 0, pp = 0, qq = 0;
    for (std::size_t b = 0; b < p.batch; ++b) {
      for (std::size_t s = 0; s < p.sites; ++s) {
        inter += p.at(b, c, s) * q.at(b, c, s);
        pp += p.at(b, c, s) * p.at(b, c, s);
        qq += q.at(b, c, s) * q.at(b, c, s);
      }
    }
    total += 1 - (2 * inter + eps) / (pp + qq + eps);
  }
  return total / static_cast<ld>(p.channels);
}

inline bool contains(const std::vector<int>& v, int x) {
  return std::find(v.begin(), v.end(), x) != v.end();
}

// Marginal Dice + CE with background = every class outside fg.
inline ld supervised(const condist::Tensor& logits, const std::vector<std::int32_t>& labels,
                     const std::vector<int>& fg, ld eps) {
  const Field p = softmax(from_tensor(logits), 1);
  std::vector<int> fgs = fg;
  std::sort(fgs.begin(), fgs.end());
  Field m;
  m.batch = p.batch;
  m.channels = fgs.size() + 1;
  m.sites = p.sites;
  m.v.assign(m.batch * m.channels * m.sites, 0);
  Field t = m;
  ld ce = 0;
  for (std::size_t b = 0; b < p.batch; ++b) {
    for (std::size_t s = 0; s < p.sites; ++s) {
      for (std::size_t c = 0; c < p.channels; ++c) {
        auto it = std::find(fgs.begin(), fgs.end(), static_cast<int>(c));
        const std::size_t mc = it == fgs.end() ? 0 : 1 + static_cast<std::size_t>(it - fgs.begin());
        m.at(b, mc, s) += p.at(b, c, s);
      }
      const int y = labels[b * p.sites + s];
      auto it = std::find(fgs.begin(), fgs.end(), y);
      const std::size_t my = it == fgs.end() ? 0 : 1 + static_cast<std::size_t>(it - fgs.begin());
      t.at(b, my, s) = 1;
    }
  }
  for (std::size_t b = 0; b < p.batch; ++b) {
    for (std::size_t s = 0; s < p.sites; ++s) {
      for (std::size_t c = 0; c < m.channels; ++c) {
        if (t.at(b, c, s) == 1) ce -= std::log(m.at(b, c, s));
      }
    }
  }
  return dice_loss(m, t, eps) + ce / static_cast<ld>(p.batch * p.sites);
}

// Brute-force distillation: softmax at tau, grouped background mass over
// total background mass, mask from teacher argmax and labels, masked Dice.
inline ld condist(const condist::Tensor& local, const condist::Tensor& global,
                  const std::vector<std::int32_t>& labels, const std::vector<int>& fg,
                  const std::vector<std::vector<int>>& groups, ld tau, ld eps, bool filter) {
  const Field pl = softmax(from_tensor(local), tau);
  const Field pg = softmax(from_tensor(global), tau);
  Field a;
  a.batch = pl.batch;
  a.channels = groups.size();
  a.sites = pl.sites;
  a.v.assign(a.batch * a.channels * a.sites, 0);
  Field b = a;
  bool any = false;
  for (std::size_t n = 0; n < pl.batch; ++n) {
    for (std::size_t s = 0; s < pl.sites; ++s) {
      std::size_t arg = 0;
      for (std::size_t c = 1; c < pg.channels; ++c) {
        if (pg.at(n, c, s) > pg.at(n, arg, s)) arg = c;
      }
      const bool keep =
          !filter || (!contains(fg, static_cast<int>(arg)) && !contains(fg, labels[n * pl.sites + s]));
      if (!keep) continue;
      any = true;
      ld fl = 0, fgm = 0;
      for (int c : fg) {
        fl += pl.at(n, static_cast<std::size_t>(c), s);
        fgm += pg.at(n, static_cast<std::size_t>(c), s);
      }
      for (std::size_t g = 0; g < groups.size(); ++g) {
        ld sl = 0, sg = 0;
        for (int c : groups[g]) {
          sl += pl.at(n, static_cast<std::size_t>(c), s);
          sg += pg.at(n, static_cast<std::size_t>(c), s);
        }
        a.at(n, g, s) = sl / (1 - fl);
        b.at(n, g, s) = sg / (1 - fgm);
      }
    }
  }
  if (!any) return 0;
  return dice_loss(a, b, eps);
}

// Set-count Dice: builds explicit index sets and intersects them.
inline std::optional<ld> dice(const std::vector<std::int32_t>& pred,
                              const std::vector<std::int32_t>& truth, const std::vector<int>& cls,
                              bool empty_protocol) {
  std::set<std::size_t> p, t, both;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (contains(cls, pred[i])) p.insert(i);
    if (contains(cls, truth[i])) t.insert(i);
  }
  std::set_intersection(p.begin(), p.end(), t.begin(), t.end(), std::inserter(both, both.end()));
  if (p.empty() && t.empty()) return empty_protocol ? std::optional<ld>(1) : std::nullopt;
  return 2 * static_cast<ld>(both.size()) / static_cast<ld>(p.size() + t.size());
}

// Closest-rank linear interpolation via nth_element selection.
inline ld quantile(std::vector<double> x, ld prob) {
  const ld h = static_cast<ld>(x.size() - 1) * prob;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = static_cast<std::size_t>(std::ceil(h));
  std::nth_element(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(lo), x.end());
  const ld a = x[lo];
  std::nth_element(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(hi), x.end());
  const ld b = x[hi];
  return a + (h - static_cast<ld>(lo)) * (b - a);
}

inline std::vector<std::int32_t> random_labels(condist::Xoshiro256& rng, std::size_t n,
                                               int classes, double fill) {
  std::vector<std::int32_t> v(n, 0);
  for (auto& x : v) {
    if (rng.uniform() < fill) x = static_cast<std::int32_t>(1 + rng.below(static_cast<std::uint64_t>(classes - 1)));
  }
  return v;
}

inline condist::Tensor random_tensor(condist::Xoshiro256& rng, condist::Shape shape, double scale) {
  std::vector<double> v(condist::shape_size(shape));
  for (auto& x : v) x = scale * rng.normal();
  return condist::Tensor(std::move(shape), std::move(v));
}

}  // namespace oracle
