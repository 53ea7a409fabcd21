#include "condist/gradcert.hpp"

#include <algorithm>

#include "condist/errors.hpp"
#include "condist/losses.hpp"
#include "condist/model.hpp"
#include "condist/rng.hpp"

namespace condist {

namespace {

struct Instance {
  ClassPartition part;
  LabelMap labels;
  Tensor local;
  Tensor global;
};

ClassPartition random_partition(Xoshiro256& rng, int n) {
  ClassSet fg, unlabeled;
  // Nonempty proper subset of 1..n-1.
  const std::uint64_t full = (std::uint64_t{1} << (n - 1)) - 1;
  const std::uint64_t bits = 1 + rng.below(full - 1);
  for (int c = 1; c < n; ++c) {
    if (bits & (std::uint64_t{1} << (c - 1))) {
      fg.push_back(c);
    } else {
      unlabeled.push_back(c);
    }
  }
  std::vector<ClassSet> groups{{0}};
  if (unlabeled.size() > 1 && rng.below(2) == 0) {
    groups.push_back(unlabeled);
  } else {
    for (int c : unlabeled) groups.push_back({c});
  }
  return ClassPartition::make(n, fg, groups);
}

Tensor random_logits(Xoshiro256& rng, const Shape& shape, double scale) {
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = scale * rng.normal();
  return Tensor(shape, std::move(v));
}

Instance make_instance(const GradCertOptions& o, std::uint64_t seed) {
  Xoshiro256 rng(seed);
  Instance inst;
  inst.part = random_partition(rng, o.num_classes);
  const Shape sites{static_cast<std::size_t>(o.batch), static_cast<std::size_t>(o.height),
                    static_cast<std::size_t>(o.width)};
  inst.labels = LabelMap(sites);
  ClassSet allowed = inst.part.foreground();
  allowed.push_back(0);
  for (auto& l : inst.labels.values()) l = allowed[rng.below(allowed.size())];
  const Shape field = field_shape(sites, static_cast<std::size_t>(o.num_classes));
  inst.local = random_logits(rng, field, 1.5);
  inst.global = random_logits(rng, field, 1.5);
  return inst;
}

DifferentiableFn mutate(DifferentiableFn f, double perturbation) {
  if (perturbation == 0.0) return f;
  return [f = std::move(f), perturbation](const Tensor& x, Tensor* grad) {
    const double v = f(x, grad);
    if (grad) {
      for (auto& g : grad->values()) g *= 1.0 + perturbation;
    }
    return v;
  };
}

void record(GradCertSuite& suite, int instance, const GradCheckReport& rep) {
  suite.cases.push_back({suite.name, instance, rep});
  suite.max_rel_error = std::max(suite.max_rel_error, rep.max_rel_error);
  suite.checked += rep.checked;
  suite.skipped += rep.skipped;
  suite.passed = suite.passed && rep.passed;
}

std::string toggle_name(bool group, bool filter) {
  return std::string("condist[group=") + (group ? "on" : "off") + ",filter=" +
         (filter ? "on" : "off") + "]";
}

// True when some ReLU pre-activation changes sign between the two
// parameter vectors.
bool relu_pattern_differs(const ForwardCache& a, const ForwardCache& b) {
  for (std::size_t l = 0; l < a.pre.size(); ++l) {
    const auto va = a.pre[l].values();
    const auto vb = b.pre[l].values();
    for (std::size_t i = 0; i < va.size(); ++i) {
      if ((va[i] > 0.0) != (vb[i] > 0.0)) return true;
    }
  }
  return false;
}

}  // namespace

bool GradCertResult::passed() const {
  return !suites.empty() &&
         std::all_of(suites.begin(), suites.end(), [](const auto& s) { return s.passed; });
}

GradCertResult run_gradcert(const GradCertOptions& o) {
  if (o.instances < 1 || o.batch < 1 || o.height < 1 || o.width < 1 || o.num_classes < 3) {
    throw ParameterError("gradcert needs instances, batch and size >= 1 and >= 3 classes");
  }
  GradCheckOptions gc;
  gc.eps = o.eps;
  gc.tol = o.tol;

  GradCertResult result;
  auto instance_seed = [&](const std::string& suite, int i) {
    return derive_seed(o.seed, suite, static_cast<std::uint64_t>(i));
  };

  {
    GradCertSuite suite{"supervised", {}, 0.0, 0, 0, true};
    const LossConfig cfg;
    for (int i = 0; i < o.instances; ++i) {
      const Instance inst = make_instance(o, instance_seed(suite.name, i));
      DifferentiableFn f = [&](const Tensor& x, Tensor* grad) {
        LossResult r = supervised_loss(x, inst.labels, inst.part, cfg);
        if (grad) *grad = std::move(r.grad);
        return r.value;
      };
      record(suite, i, grad_check(mutate(f, o.perturbation), inst.local, gc));
    }
    result.suites.push_back(std::move(suite));
  }

  for (bool group : {true, false}) {
    for (bool filter : {true, false}) {
      GradCertSuite suite{toggle_name(group, filter), {}, 0.0, 0, 0, true};
      LossConfig cfg;
      cfg.enable_bg_grouping = group;
      cfg.enable_fg_filtering = filter;
      for (int i = 0; i < o.instances; ++i) {
        const Instance inst = make_instance(o, instance_seed(suite.name, i));
        DifferentiableFn f = [&](const Tensor& x, Tensor* grad) {
          LossResult r = condist_loss(x, inst.global, inst.labels, inst.part, cfg);
          if (grad) *grad = std::move(r.grad);
          return r.value;
        };
        record(suite, i, grad_check(mutate(f, o.perturbation), inst.local, gc));
      }
      result.suites.push_back(std::move(suite));
    }
  }

  {
    GradCertSuite suite{"total", {}, 0.0, 0, 0, true};
    const LossConfig cfg;
    for (int i = 0; i < o.instances; ++i) {
      const Instance inst = make_instance(o, instance_seed(suite.name, i));
      const double lambda = 0.01 + 0.99 * static_cast<double>(i) / std::max(1, o.instances - 1);
      DifferentiableFn f = [&](const Tensor& x, Tensor* grad) {
        LossResult r = total_loss(x, inst.global, inst.labels, inst.part, cfg, lambda);
        if (grad) *grad = std::move(r.grad);
        return r.value;
      };
      record(suite, i, grad_check(mutate(f, o.perturbation), inst.local, gc));
    }
    result.suites.push_back(std::move(suite));
  }

  {
    GradCertSuite suite{"model+prox", {}, 0.0, 0, 0, true};
    ArchSpec arch;
    arch.num_classes = o.num_classes;
    for (int i = 0; i < o.instances; ++i) {
      const std::uint64_t s = instance_seed(suite.name, i);
      Instance inst = make_instance(o, s);
      Xoshiro256 rng(derive_seed(s, "images"));
      Batch batch;
      std::vector<double> img(static_cast<std::size_t>(o.batch) * o.height * o.width);
      for (auto& v : img) v = rng.uniform();
      batch.images = Tensor({static_cast<std::size_t>(o.batch), 1, static_cast<std::size_t>(o.height),
                             static_cast<std::size_t>(o.width)},
                            std::move(img));
      batch.labels = inst.labels;
      const ModelParams params = init_params(arch, derive_seed(s, "params"));
      const ModelParams teacher = init_params(arch, derive_seed(s, "teacher"));
      const ModelParams anchor = init_params(arch, derive_seed(s, "anchor"));
      ObjectiveTerms terms;
      terms.partition = &inst.part;
      terms.lambda = 0.5;
      terms.teacher = &teacher;
      terms.prox_mu = 0.05;
      terms.anchor = &anchor;

      auto with_flat = [&](const Tensor& x) {
        ModelParams p = params;
        std::copy(x.values().begin(), x.values().end(), p.flat.begin());
        return p;
      };
      DifferentiableFn f = [&](const Tensor& x, Tensor* grad) {
        const LossAndGrad lg = loss_and_grad(with_flat(x), batch, terms);
        if (grad) *grad = Tensor({lg.grad.size()}, lg.grad);
        return lg.value;
      };
      const Tensor point({params.size()}, params.flat);
      GradCheckOptions mgc = gc;
      mgc.skip = [&](std::size_t k) {
        ModelParams plus = params, minus = params;
        plus.flat[k] += o.eps;
        minus.flat[k] -= o.eps;
        return relu_pattern_differs(forward_cached(plus, batch.images),
                                    forward_cached(minus, batch.images));
      };
      record(suite, i, grad_check(mutate(f, o.perturbation), point, mgc));
    }
    // Kink skipping must stay a small minority of coordinates.
    if (suite.skipped * 20 > suite.checked + suite.skipped) suite.passed = false;
    result.suites.push_back(std::move(suite));
  }
  return result;
}

}  // namespace condist
