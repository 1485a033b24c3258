#pragma once

// The finite-difference suite run by `anticipate gradcheck` and the
// acceptance binary: every differentiable op plus the composed fuser,
// decoder, heads and the three losses, all in double precision.

#include <functional>
#include <string>
#include <vector>

#include "mat/gradcheck.hpp"
#include "mat/model.hpp"
#include "mat/objectives.hpp"
#include "mat/text.hpp"

namespace mat {

struct GradCheckCase {
  std::string name;
  std::string scope;  // tensor_engine | neural_blocks | fusion | anticipator | objectives
  std::function<GradCheckResult()> run;
};

inline const std::vector<std::string>& gradcheck_scopes() {
  static const std::vector<std::string> v{"tensor_engine", "neural_blocks", "fusion", "anticipator", "objectives"};
  return v;
}

namespace detail {

using TD = Tensor<double>;
using GcFn = std::function<TD(const std::vector<TD>&)>;

/// Fixed random weighting: any tensor -> scalar with a non-trivial upstream gradient.
inline TD gc_project(const TD& x, std::uint64_t seed) {
  CounterRng rng(seed);
  return sum_all(mul(x, random_tensor(rng, x.shape())));
}

inline std::vector<TD> gc_params(const ParamList<double>& list) {
  std::vector<TD> out;
  for (const auto& [name, t] : list) out.push_back(t);
  return out;
}

/// Small double-precision model for composed-module checks.
inline Model<double> gc_model(bool exclusive = false) {
  ModelConfig cfg;
  cfg.dim = 4;
  cfg.heads = 2;
  cfg.fuser_layers = 2;
  cfg.decoder_layers = 2;
  cfg.contrast_dim = 3;
  cfg.max_len = 4;
  cfg.num_classes = 3;
  cfg.text_buckets = 8;
  cfg.exclusive_mask = exclusive;
  cfg.modalities = {{"rgb", ModalityKind::kDense, 3}, {"act_text", ModalityKind::kText, 0}};
  Model<double> m(cfg, 5);
  // Larger than training-time init so each block is far from linear.
  CounterRng rng(6);
  for (auto& [name, t] : m.parameters()) {
    for (auto& v : t.values()) v += rng.normal(0.0, 0.3);
  }
  return m;
}

inline BoolMatrix gc_causal(std::size_t n) {
  BoolMatrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) m.set(i, j, true);
  }
  return m;
}

}  // namespace detail

/// All cases, in a fixed order.
inline std::vector<GradCheckCase> gradcheck_cases(const GradCheckOptions& opt = {}) {
  using detail::gc_project;
  using detail::TD;
  std::vector<GradCheckCase> cases;
  auto add_case = [&](std::string name, std::string scope, std::function<std::vector<TD>()> make, detail::GcFn f) {
    cases.push_back({name, scope, [=] { return check_gradients(name, make(), f, opt); }});
  };
  auto rnd = [](std::uint64_t seed, Shape s, double lo = -1.0, double hi = 1.0) {
    CounterRng rng(seed);
    return random_tensor(rng, std::move(s), lo, hi);
  };
  const std::string te = "tensor_engine";

  add_case("matmul", te, [=] { return std::vector<TD>{rnd(1, {2, 3, 4}), rnd(2, {2, 4, 2})}; },
           [](const auto& in) { return gc_project(matmul(in[0], in[1]), 1); });
  add_case("matmul_transpose_b", te, [=] { return std::vector<TD>{rnd(3, {2, 3, 4}), rnd(4, {5, 4})}; },
           [](const auto& in) { return gc_project(matmul(in[0], in[1], true), 2); });
  add_case("linear", te, [=] { return std::vector<TD>{rnd(5, {2, 3, 4}), rnd(6, {5, 4}), rnd(7, {5})}; },
           [](const auto& in) { return gc_project(linear(in[0], in[1], in[2]), 3); });
  add_case("add", te, [=] { return std::vector<TD>{rnd(8, {3, 4}), rnd(9, {4})}; },
           [](const auto& in) { return gc_project(add(in[0], in[1]), 4); });
  add_case("sub", te, [=] { return std::vector<TD>{rnd(10, {3, 4}), rnd(11, {3, 4})}; },
           [](const auto& in) { return gc_project(sub(in[0], in[1]), 5); });
  add_case("mul_elementwise", te, [=] { return std::vector<TD>{rnd(12, {3, 4}), rnd(13, {1})}; },
           [](const auto& in) { return gc_project(mul(in[0], in[1]), 6); });
  add_case("scale", te, [=] { return std::vector<TD>{rnd(14, {5})}; },
           [](const auto& in) { return gc_project(scale(in[0], -1.7), 7); });
  add_case("reshape", te, [=] { return std::vector<TD>{rnd(15, {2, 6})}; },
           [](const auto& in) { return gc_project(reshape(in[0], Shape{3, 4}), 8); });
  add_case("transpose", te, [=] { return std::vector<TD>{rnd(16, {2, 3, 4})}; },
           [](const auto& in) { return gc_project(transpose(in[0], 0, 2), 9); });
  add_case("concat", te, [=] { return std::vector<TD>{rnd(17, {2, 3}), rnd(18, {2, 2})}; },
           [](const auto& in) { return gc_project(concat<double>({in[0], in[1]}, 1), 10); });
  add_case("slice", te, [=] { return std::vector<TD>{rnd(19, {3, 5})}; },
           [](const auto& in) { return gc_project(slice(in[0], 1, 1, 4), 11); });
  add_case("expand", te, [=] { return std::vector<TD>{rnd(20, {2, 3})}; },
           [](const auto& in) { return gc_project(expand(in[0], 3), 12); });
  add_case("select_rows", te, [=] { return std::vector<TD>{rnd(21, {2, 3, 4}), rnd(22, {3, 4})}; },
           [](const auto& in) { return gc_project(select_rows(in[0], in[1], {1, 0, 1, 0, 0, 1}), 13); });
  add_case("sum", te, [=] { return std::vector<TD>{rnd(23, {2, 3, 4})}; },
           [](const auto& in) { return gc_project(sum(in[0], 1), 14); });
  add_case("mean", te, [=] { return std::vector<TD>{rnd(24, {2, 3, 4})}; },
           [](const auto& in) { return gc_project(mean(in[0], -1), 15); });
  add_case("exp", te, [=] { return std::vector<TD>{rnd(25, {6})}; },
           [](const auto& in) { return gc_project(exp(in[0]), 16); });
  add_case("log", te, [=] { return std::vector<TD>{rnd(26, {6}, 0.5, 2.0)}; },
           [](const auto& in) { return gc_project(log(in[0]), 17); });
  add_case("gelu", te, [=] { return std::vector<TD>{rnd(27, {8}, -3.0, 3.0)}; },
           [](const auto& in) { return gc_project(gelu(in[0]), 18); });
  add_case("softmax", te, [=] { return std::vector<TD>{rnd(28, {3, 4})}; },
           [](const auto& in) { return gc_project(softmax(in[0], 0), 19); });
  add_case("masked_softmax", te, [=] { return std::vector<TD>{rnd(29, {2, 3, 3})}; },
           [](const auto& in) { return gc_project(masked_softmax(in[0], detail::gc_causal(3)), 20); });
  add_case("attention", te,
           [=] { return std::vector<TD>{rnd(30, {2, 3, 4}), rnd(31, {2, 3, 4}), rnd(32, {2, 3, 4})}; },
           [](const auto& in) { return gc_project(attention(in[0], in[1], in[2], 2, detail::gc_causal(3)), 21); });
  add_case("layer_norm", te, [=] { return std::vector<TD>{rnd(33, {3, 5}), rnd(34, {5}), rnd(35, {5})}; },
           [](const auto& in) { return gc_project(layer_norm(in[0], in[1], in[2], 1e-5), 22); });
  add_case("l2_normalize", te, [=] { return std::vector<TD>{rnd(36, {3, 4})}; },
           [](const auto& in) { return gc_project(l2_normalize(in[0], 1), 23); });
  add_case("embedding_lookup", te, [=] { return std::vector<TD>{rnd(37, {5, 3})}; },
           [](const auto& in) { return gc_project(embedding_lookup(in[0], {4, 0, 4}), 24); });
  add_case("embedding_bag", te, [=] { return std::vector<TD>{rnd(38, {5, 3})}; }, [](const auto& in) {
    static const SparseVec a{{1, 3}, {0.6, -0.8}};
    static const SparseVec b{{0}, {1.0}};
    return gc_project(embedding_bag(in[0], {&a, &b, &a}), 25);
  });
  add_case("mse", te, [=] { return std::vector<TD>{rnd(39, {2, 3}), rnd(40, {2, 3})}; },
           [](const auto& in) { return mse(in[0], in[1]); });
  add_case("cross_entropy_with_logits", te, [=] { return std::vector<TD>{rnd(41, {4, 5}, -2.0, 2.0)}; },
           [](const auto& in) { return cross_entropy_with_logits(in[0], {0, 4, 2, 2}); });

  // Composed modules: inputs are the module's own parameters plus its input.
  const std::string nb = "neural_blocks";
  cases.push_back({"encoder_block", nb, [opt] {
                     CounterRng rng(50);
                     EncoderBlockParams<double> p(4, 2, rng);
                     ParamList<double> list;
                     p.collect("b", list);
                     for (auto& [n, t] : list) {
                       for (auto& v : t.values()) v += rng.normal(0.0, 0.3);
                     }
                     auto inputs = detail::gc_params(list);
                     inputs.push_back(random_tensor(rng, Shape{2, 3, 4}));
                     const auto mask = causal_mask(3, false);
                     return check_gradients(
                         "encoder_block", inputs,
                         [p, mask](const auto& in) {
                           return gc_project(encoder_block_forward(p, in.back(), mask), 51);
                         },
                         opt);
                   }});
  cases.push_back({"positional_table", nb, [opt] {
                     CounterRng rng(52);
                     PositionalTable<double> pos(4, 4, rng);
                     ParamList<double> list;
                     pos.collect("pos", list);
                     auto inputs = detail::gc_params(list);
                     inputs.push_back(random_tensor(rng, Shape{2, 3, 4}));
                     return check_gradients(
                         "positional_table", inputs,
                         [pos](const auto& in) { return gc_project(pos.apply(in.back()), 53); }, opt);
                   }});

  cases.push_back({"fuser", "fusion", [opt] {
                     const auto model = detail::gc_model();
                     ParamList<double> list;
                     model.fuser.collect("fuser", list);
                     auto inputs = detail::gc_params(list);
                     CounterRng rng(60);
                     inputs.push_back(random_tensor(rng, Shape{2, 2, 2, 4}));
                     const std::vector<std::uint8_t> present{1, 1, 1, 0, 0, 1, 1, 1};
                     return check_gradients(
                         "fuser", inputs,
                         [model, present](const auto& in) {
                           return gc_project(fuse_sequence(model.fuser, in.back(), present), 61);
                         },
                         opt);
                   }});

  for (bool exclusive : {false, true}) {
    const std::string name = exclusive ? "decoder_exclusive" : "decoder";
    cases.push_back({name, "anticipator", [opt, exclusive, name] {
                       const auto model = detail::gc_model(exclusive);
                       ParamList<double> list;
                       for (std::size_t l = 0; l < model.decoder.size(); ++l) {
                         model.decoder[l].collect("decoder.block" + std::to_string(l), list);
                       }
                       model.positions.collect("decoder.positions", list);
                       auto inputs = detail::gc_params(list);
                       CounterRng rng(70);
                       inputs.push_back(random_tensor(rng, Shape{2, 3, 4}));
                       return check_gradients(
                           name, inputs,
                           [model](const auto& in) { return gc_project(anticipate(model, in.back()), 71); }, opt);
                     }});
  }
  cases.push_back({"model_pretrain", "anticipator", [opt] {
                     // Whole trunk plus both heads, through the real input path.
                     const auto model = detail::gc_model();
                     auto inputs = detail::gc_params(model.parameters());
                     static const SparseVec t0{{1, 5}, {0.6, 0.8}}, t1{{2}, {1.0}}, d0{{3, 7}, {0.8, -0.6}},
                         d1{{0, 4}, {0.6, 0.8}};
                     ModelInput in;
                     in.batch = 2;
                     in.steps = 3;
                     CounterRng rng(80);
                     in.dense.resize(2);
                     in.text.resize(2);
                     for (int i = 0; i < 18; ++i) in.dense[0].push_back(float(rng.uniform(-1.0, 1.0)));
                     in.text[1] = {&t0, &t1, &t0, &t1, &t1, &t0};
                     in.present = {1, 1, 1, 0, 1, 1, 0, 1, 1, 1, 1, 1};
                     in.descriptions = {&d0, &d1};
                     GradCheckOptions o = opt;
                     if (o.max_coords == 0) o.max_coords = 24;
                     return check_gradients(
                         "model_pretrain", inputs,
                         [model, in](const auto&) {
                           const auto out = model_forward(model, in, Stage::kPretrain);
                           return contrastive_loss(out.video, out.text, model.log_temperature).cross;
                         },
                         o);
                   }});
  cases.push_back({"model_finetune", "anticipator", [opt] {
                     const auto model = detail::gc_model();
                     auto inputs = detail::gc_params(model.parameters());
                     static const SparseVec t0{{1, 5}, {0.6, 0.8}}, t1{{2}, {1.0}};
                     ModelInput in;
                     in.batch = 2;
                     in.steps = 3;
                     CounterRng rng(81);
                     in.dense.resize(2);
                     in.text.resize(2);
                     for (int i = 0; i < 18; ++i) in.dense[0].push_back(float(rng.uniform(-1.0, 1.0)));
                     in.text[1] = {&t1, &t0, &t0, &t1, &t0, &t0};
                     in.present = {1, 1, 0, 1, 1, 1, 1, 0, 1, 1, 1, 1};
                     GradCheckOptions o = opt;
                     if (o.max_coords == 0) o.max_coords = 24;
                     return check_gradients(
                         "model_finetune", inputs,
                         [model, in](const auto&) {
                           const auto out = model_forward(model, in, Stage::kFinetune);
                           return classification_loss(out.logits, {2, 0});
                         },
                         o);
                   }});

  const std::string ob = "objectives";
  add_case("contrastive_loss", ob, [=] { return std::vector<TD>{rnd(90, {3, 4}), rnd(91, {3, 4}), rnd(92, {1}, -1.0, 0.0)}; },
           [](const auto& in) {
             return contrastive_loss(l2_normalize(in[0], 1), l2_normalize(in[1], 1), in[2]).cross;
           });
  add_case("contrastive_loss_same_class", ob,
           [=] { return std::vector<TD>{rnd(93, {4, 3}), rnd(94, {4, 3}), rnd(95, {1}, -1.0, 0.0)}; },
           [](const auto& in) {
             static const std::vector<std::size_t> classes{0, 1, 0, 2};
             return contrastive_loss(l2_normalize(in[0], 1), l2_normalize(in[1], 1), in[2], &classes, true).cross;
           });
  // The fused target is stop-gradient, so it enters as a constant.
  add_case("feature_loss", ob, [=] { return std::vector<TD>{rnd(96, {2, 4, 3})}; }, [=](const auto& in) {
    static const TD target = rnd(97, {2, 4, 3});
    return feature_loss(in[0], target);
  });
  add_case("classification_loss", ob, [=] { return std::vector<TD>{rnd(98, {4, 5}, -2.0, 2.0)}; },
           [](const auto& in) { return classification_loss(in[0], {1, 0, 4, 1}); });
  return cases;
}

/// Runs the cases of one scope ("all" for every case).
inline std::vector<GradCheckResult> run_gradcheck_suite(const std::string& scope = "all",
                                                        const GradCheckOptions& opt = {}) {
  const auto& scopes = gradcheck_scopes();
  if (scope != "all" && std::find(scopes.begin(), scopes.end(), scope) == scopes.end()) {
    throw ConfigError("gradcheck: unknown scope '" + scope + "'");
  }
  std::vector<GradCheckResult> out;
  for (const auto& c : gradcheck_cases(opt)) {
    if (scope == "all" || c.scope == scope) out.push_back(c.run());
  }
  return out;
}

}  // namespace mat
