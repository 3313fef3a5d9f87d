// Acceptance checks: one [PASS]/[FAIL] line per criterion, nonzero exit if any fail.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "gradient_suite.hpp"
#include "mp/experiment.hpp"
#include "mp/optim.hpp"
#include "oracles.hpp"

using namespace mp;
using testing::random_tensor;
using testing::randomize;
using testing::values_of;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(const char* name, const std::function<Outcome()>& check) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = check();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("[%s] %s: %s (%.2fs)\n", o.pass ? "PASS" : "FAIL", name, o.detail.c_str(), secs);
  std::fflush(stdout);
  failures += o.pass ? 0 : 1;
}

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

Outcome dimension_law() {
  const std::pair<std::size_t, std::size_t> grid[] = {{128, 2}, {256, 4}, {512, 8}, {64, 2}};
  std::string detail;
  bool ok = true;
  for (const auto& [d_hat, h] : grid) {
    const MHC3Config cfg{d_hat, d_hat, h};
    const MPHeadParams p = MPHeadParams::init(cfg, 2, 0);
    NoGradGuard no_grad;
    const std::size_t len = mhc3(TokenFeatures::constant(random_tensor({3, d_hat}, d_hat)), cfg, p).size();
    const std::size_t q = d_hat / (4 * h);
    const double ratio = static_cast<double>(d_hat * d_hat) / static_cast<double>(len);
    ok = ok && len == (h - 1) * q * q && len == cfg.output_size() && ratio >= 16.0 * static_cast<double>(h);
    detail += "(" + std::to_string(d_hat) + "," + std::to_string(h) + ")->" + std::to_string(len) + " ";
  }
  return {ok, detail + "lengths exact, ratio >= 16h"};
}

Outcome gradient_suite() {
  double op_worst = 0.0, mp_worst = 0.0, plus_worst = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    for (const auto& [name, err] : testing::op_gradient_errors(seed)) op_worst = std::max(op_worst, err);
    mp_worst = std::max(mp_worst, testing::mp_loss_gradient_error(seed));
  }
  const testing::MpPlusGradientRun plus = testing::mp_plus_gradient_errors(20);
  for (const auto& [seed, err] : plus.checked) plus_worst = std::max(plus_worst, err);
  const bool ok = op_worst < 1e-4 && mp_worst < 1e-4 && plus_worst < 1e-4 && plus.checked.size() == 20;
  return {ok, "20 seeds: ops " + fmt("%.2e", op_worst) + ", MP loss " + fmt("%.2e", mp_worst) + ", MP+ loss " +
                  fmt("%.2e", plus_worst) + " (" + std::to_string(plus.skipped.size()) +
                  " ill-conditioned seeds skipped)"};
}

Outcome oracle_equivalence() {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const std::size_t h = 2 + seed % 3;
    const Tensor x_hat = random_tensor({5, 3 * h}, seed, -2, 2);
    const auto got = cross_cov_adjacent(split_heads(Value::constant(x_hat), h));
    const auto want = oracle::cross_cov(x_hat, h);
    if (got.size() != want.size()) return {false, "block count differs"};
    for (std::size_t i = 0; i < got.size(); ++i) worst = std::max(worst, max_abs_diff(got[i].data(), want[i]));
  }
  return {worst < 1e-12, "100 instances, max elementwise diff " + fmt("%.2e", worst)};
}

Outcome identity_at_init() {
  const BackboneWeights w = BackboneWeights::generate(testing::toy_backbone());
  const MHC3Config cfg{16, 8, 2};
  MPHeadParams head = MPHeadParams::init(cfg, 3, 1);
  randomize({head.w1, head.b1, head.w2, head.b2}, 1);
  const PSRPParams psrp = PSRPParams::init(w.cfg, 4, 1);
  bool exact = true;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Tensor tokens = random_tensor({5, 16}, seed);
    const MPOutput plus = mp_plus_forward(tokens, w, psrp, cfg, head, FirstMomentMode::cls);
    const MPOutput frozen =
        mp_forward(backbone_forward(Value::constant(w.with_cls(tokens)), w), cfg, head, FirstMomentMode::cls);
    exact = exact && plus.logits.data() == frozen.logits.data();
  }

  std::vector<Tensor> before;
  for (const Value& v : w.all()) before.push_back(v.data());
  const Tensor cls_before = w.cls_token;
  const ProbeHead probe = ProbeHead::init({HeadKind::mp, 16, 3, 8, 2}, 1);
  PSRPParams trained = PSRPParams::init(w.cfg, 4, 1);
  std::vector<Value> params = values_of(probe.named_params());
  for (const Value& v : values_of(trained.named())) params.push_back(v);
  AdamW opt(params);
  const std::vector<std::uint32_t> labels{1};
  const Tensor tokens = random_tensor({5, 16}, 1);
  for (int step = 0; step < 100; ++step) {
    opt.zero_grad();
    backward(softmax_cross_entropy(stack({mp_plus_forward(tokens, w, trained, probe).logits}), labels));
    opt.step(1e-2);
  }
  bool frozen_same = w.cls_token == cls_before;
  const auto after = w.all();
  for (std::size_t i = 0; i < after.size(); ++i) frozen_same = frozen_same && after[i].data() == before[i];
  const bool psrp_moved = trained.layers[0].w_up1.data().frobenius_norm() > 0.0;
  return {exact && frozen_same && psrp_moved,
          std::string("logits ") + (exact ? "bit-exact" : "DIFFER") + " on 10 inputs; " +
              std::to_string(before.size()) + " frozen tensors " + (frozen_same ? "bit-identical" : "CHANGED") +
              " after 100 steps; PSRP " + (psrp_moved ? "updated" : "NOT updated")};
}

RunConfig head_run(const std::string& kind, std::size_t d_hat, std::size_t h) {
  RunConfig c;
  c.head = kind;
  c.d_hat = d_hat;
  c.h = h;
  c.train.epochs = 20;
  c.train.seed = 1;
  return c;
}

Outcome separability() {
  SynthSpec cov;
  cov.classes = 2;
  cov.dim = 8;
  cov.tokens = 32;
  cov.rho = 0.8;
  cov.per_class = 500;
  cov.seed = 1;
  cov.regime = SynthRegime::cov_sep;
  const FeatureDataset cov_ds = synth_generate(cov);
  const double mp_acc = run_training(head_run("mp", 8, 2), cov_ds, "").result.final_eval.accuracy;
  const double gap_acc = run_training(head_run("lp-gap", 0, 2), cov_ds, "").result.final_eval.accuracy;

  SynthSpec mean = cov;
  mean.regime = SynthRegime::mean_sep;
  mean.delta = 10.0;
  const double lp_acc = run_training(head_run("lp-gap", 0, 2), synth_generate(mean), "").result.final_eval.accuracy;
  const bool ok = gap_acc >= 0.40 && gap_acc <= 0.60 && mp_acc >= 0.90 && lp_acc >= 0.99;
  return {ok, "cov_sep LP-GAP " + fmt("%.3f", gap_acc) + " in [0.40,0.60], MP " + fmt("%.3f", mp_acc) +
                  " >= 0.90; mean_sep LP " + fmt("%.3f", lp_acc) + " >= 0.99"};
}

Outcome ablation_ordering() {
  SynthSpec s;
  s.classes = 4;
  s.dim = 16;
  s.tokens = 32;
  s.regime = SynthRegime::mixed;
  s.delta = 1.5;
  s.rho = 0.8;
  s.per_class = 500;
  s.seed = 1;
  s.with_cls = true;
  const AblationOutcome out = run_ablation(Suite::probing, head_run("mp", 16, 4), synth_generate(s), "");
  double mp_acc = 0.0;
  for (const auto& row : out.report["rows"]) {
    if (row["head"] == "mp") mp_acc = row["val_accuracy"].get<double>();
  }
  bool ok = true;
  std::string detail = "MP " + fmt("%.4f", mp_acc);
  for (const auto& row : out.report["rows"]) {
    const std::string kind = row["head"].get<std::string>();
    if (kind != "lp-cls" && kind != "lp-gap" && kind != "gcp" && kind != "mhc3") continue;
    const double acc = row["val_accuracy"].get<double>();
    ok = ok && mp_acc >= acc - 0.005;
    detail += ", " + row["label"].get<std::string>() + " " + fmt("%.4f", acc);
  }
  return {ok, detail + " (MP >= each within 0.5%)"};
}

// d_hat d + d_hat + 2 (9 (h-1)^2 + (h-1)) + C d + C + C (h-1) (d_hat/4h)^2 + C, written out independently.
std::size_t independent_mp_count(std::size_t d, std::size_t d_hat, std::size_t h, std::size_t c) {
  const std::size_t g = h - 1, q = d_hat / (4 * h);
  const std::size_t reduction = d_hat * d + d_hat;
  const std::size_t lra = 2 * (g * g * 3 * 3 + g);
  const std::size_t first = c * d + c;
  const std::size_t second = c * g * q * q + c;
  return reduction + lra + first + second;
}

Outcome param_accounting() {
  CounterRng rng(2024);
  bool ok = true;
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t h = 2 + rng.below(7);
    const std::size_t d_hat = 4 * h * (1 + rng.below(4));
    const std::size_t d = d_hat + rng.below(33);
    const std::size_t classes = 2 + rng.below(20);
    const MHC3Config cfg{d, d_hat, h};
    const ParamCount pc = count_params(MPHeadParams::init(cfg, classes, trial), cfg, classes);
    ok = ok && pc.counted == independent_mp_count(d, d_hat, h, classes) && pc.counted == pc.closed_form;
  }
  std::string sweep;
  for (const auto& [d, h] : {std::pair<std::size_t, std::size_t>{768, 8}, {48, 2}}) {
    std::size_t prev = 0;
    for (std::size_t v : dhat_sweep(d, h)) {
      const std::size_t n = ProbeHead::init({HeadKind::mp, d, 1000, v, h}, 0).param_count();
      ok = ok && n > prev && n == independent_mp_count(d, v, h, 1000);
      prev = n;
      sweep += std::to_string(n) + " ";
    }
    sweep += "| ";
  }
  return {ok, "10 random configs exact; d_hat sweeps (d=768 h=8 | d=48 h=2): " + sweep + "strictly increasing"};
}

Outcome determinism() {
  SynthSpec s;
  s.dim = 8;
  s.tokens = 16;
  s.per_class = 100;
  s.seed = 4;
  const FeatureDataset ds = synth_generate(s);
  RunConfig c = head_run("mp", 8, 2);
  c.train.epochs = 5;
  const RunOutcome a = run_training(c, ds, "");
  const RunOutcome b = run_training(c, ds, "");
  RunConfig p = c;
  p.command = "train-mpplus";
  p.train.epochs = 1;
  const FeatureDataset small = ds.subset({0, 1, 2, 3, 4, 5, 100, 101, 102, 103, 104, 105});
  const RunOutcome pa = run_training(p, small, "");
  const RunOutcome pb = run_training(p, small, "");
  const bool ck = encode_checkpoint(a.checkpoint) == encode_checkpoint(b.checkpoint) &&
                  encode_checkpoint(pa.checkpoint) == encode_checkpoint(pb.checkpoint);
  const bool rep = strip_wall_clock(a.report).dump() == strip_wall_clock(b.report).dump() &&
                   strip_wall_clock(pa.report).dump() == strip_wall_clock(pb.report).dump();
  return {ck && rep, std::string("checkpoints ") + (ck ? "byte-identical" : "DIFFER") + ", reports " +
                         (rep ? "byte-identical" : "DIFFER") + " without wall-clock fields (train and train-mpplus)"};
}

Outcome optimizer() {
  Value theta = Value::parameter(Tensor::scalar(1.0));
  AdamW opt({theta}, {0.9, 0.999, 1e-8, 0.0});
  backward(sum(theta));
  opt.step(0.1);
  const double got = theta.data()[0];
  const Schedule s{10, 100, 1e-3, 1e-6};
  const bool sched = lr_at(0, s) == 0.0 && lr_at(10, s) == 1e-3 && lr_at(100, s) == 1e-6;
  const bool ok = std::abs(got - 0.9) < 1e-9 && got == 1.0 - 0.1 / (1.0 + 1e-8) && sched;
  return {ok, "theta 1.0 -> " + fmt("%.12f", got) + "; schedule lr(0)=0, lr(warmup)=base, lr(T)=min " +
                  (sched ? "exact" : "WRONG")};
}

}  // namespace

int main() {
  report("Dimension law", dimension_law);
  report("Gradient suite", gradient_suite);
  report("Oracle equivalence", oracle_equivalence);
  report("Identity at init", identity_at_init);
  report("Separability experiment", separability);
  report("Ablation ordering", ablation_ordering);
  report("Parameter-count accounting", param_accounting);
  report("Determinism", determinism);
  report("Optimizer", optimizer);
  std::printf("%d of 9 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
