#include "gmln/train.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "gmln/binio.hpp"
#include "gmln/rng.hpp"

namespace gmln {

namespace fs = std::filesystem;

// ---- loss ----

void LossConfig::validate() const {
  if (dice_weight < 0 || ce_weight < 0 || (dice_weight == 0 && ce_weight == 0))
    throw SpecError("loss weights must be non-negative and not both zero");
  if (smooth < 0) throw SpecError("dice smoothing must be non-negative");
}

LossResult dice_ce_loss(const Var& logits, std::span<const std::uint8_t> labels,
                        const LossConfig& cfg) {
  cfg.validate();
  if (logits.rank() != 5) throw ShapeError("loss: logits must be (B, C, D, H, W), got " + to_string(logits.shape()));
  const auto B = logits.dim(0), C = logits.dim(1);
  const auto V = logits.dim(2) * logits.dim(3) * logits.dim(4);
  if (static_cast<std::int64_t>(labels.size()) != B * V)
    throw ShapeError("loss: " + std::to_string(labels.size()) + " labels for " + std::to_string(B * V) +
                     " voxels");
  Tensor onehot(logits.shape(), logits.dtype());
  std::vector<double> class_count(C, 0.0);
  dispatch(logits.dtype(), [&]<class T>(T) {
    auto g = onehot.mutable_data<T>();
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t i = 0; i < V; ++i) {
        const auto l = labels[b * V + i];
        if (l >= C)
          throw DataError("loss: label " + std::to_string(l) + " at voxel " + std::to_string(b * V + i) +
                          " outside {0.." + std::to_string(C - 1) + "}");
        g[(b * C + l) * V + i] = T(1);
        class_count[l] += 1;
      }
  });
  const auto g = constant(onehot);
  const std::vector<int> reduce{0, 2, 3, 4};

  auto p = ops::softmax(logits, 1);
  auto inter = ops::sum_axes(ops::mul(p, g), reduce);
  auto psum = ops::sum_axes(p, reduce);
  Tensor gden({1, C, 1, 1, 1}, logits.dtype());
  for (std::int64_t c = 0; c < C; ++c)
    dispatch(logits.dtype(), [&]<class T>(T) { gden.mutable_data<T>()[c] = static_cast<T>(class_count[c] + cfg.smooth); });
  auto per_class = ops::div(ops::add_scalar(ops::scale(inter, 2.0), cfg.smooth),
                            ops::add(psum, constant(gden)));
  auto dice = ops::add_scalar(ops::scale(ops::mean(per_class), -1.0), 1.0);
  auto ce = ops::scale(ops::sum(ops::mul(ops::log_softmax(logits, 1), g)),
                       -1.0 / static_cast<double>(B * V));

  LossResult r;
  r.total = ops::add(ops::scale(dice, cfg.dice_weight), ops::scale(ce, cfg.ce_weight));
  r.dice = dice.value.item();
  r.ce = ce.value.item();
  for (std::int64_t c = 0; c < C && c < kClasses; ++c) r.class_dice[c] = per_class.value.at(c);
  return r;
}

// ---- optimizer ----

AdamW::AdamW(std::vector<ParamEntry> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto& p : params_) {
    m_.push_back(Tensor::zeros(p.value.shape(), p.value.dtype()));
    v_.push_back(Tensor::zeros(p.value.shape(), p.value.dtype()));
  }
}

AdamW::StepResult AdamW::step(const Tape& tape, double lr) {
  std::vector<Tensor> grads;
  grads.reserve(params_.size());
  for (const auto& p : params_) grads.push_back(tape.grad_of(p.value));
  return step(grads, lr);
}

AdamW::StepResult AdamW::step(const std::vector<Tensor>& grads, double lr) {
  if (grads.size() != params_.size()) throw ContractError("adamw: gradient list does not match parameters");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!grads[i].defined()) continue;
    if (grads[i].shape() != params_[i].value.shape())
      throw ShapeError("adamw: gradient for " + params_[i].name + " has the wrong shape");
    bool finite = true;
    dispatch(grads[i].dtype(), [&]<class T>(T) {
      for (T g : grads[i].data<T>()) finite = finite && std::isfinite(g);
    });
    if (!finite) return {false, "non-finite gradient in " + params_[i].name};
  }
  ++step_;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  const double decay = 1.0 - lr * cfg_.weight_decay;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!grads[i].defined()) continue;
    Tensor p = params_[i].value;
    dispatch(p.dtype(), [&]<class T>(T) {
      auto w = p.mutable_data<T>();
      auto m = m_[i].mutable_data<T>();
      auto v = v_[i].mutable_data<T>();
      auto g = grads[i].data<T>();
      for (std::size_t k = 0; k < w.size(); ++k) {
        const double gk = g[k];
        const double mk = b1 * m[k] + (1.0 - b1) * gk;
        const double vk = b2 * v[k] + (1.0 - b2) * gk * gk;
        m[k] = static_cast<T>(mk);
        v[k] = static_cast<T>(vk);
        const double upd = (mk / c1) / (std::sqrt(vk / c2) + cfg_.eps);
        w[k] = static_cast<T>(static_cast<double>(w[k]) * decay - lr * upd);
      }
    });
  }
  return {true, {}};
}

CheckpointFile AdamW::state() const {
  CheckpointFile f;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    f.entries.push_back({"m/" + params_[i].name, m_[i]});
    f.entries.push_back({"v/" + params_[i].name, v_[i]});
  }
  f.entries.push_back({"step", Tensor::full({1}, static_cast<double>(step_))});
  return f;
}

void AdamW::load_state(const CheckpointFile& file) {
  std::vector<Tensor> m(params_.size()), v(params_.size());
  std::optional<std::int64_t> step;
  for (const auto& e : file.entries) {
    if (e.name == "step") {
      step = static_cast<std::int64_t>(e.value.item());
      continue;
    }
    bool known = false;
    for (std::size_t i = 0; i < params_.size() && !known; ++i) {
      for (int which = 0; which < 2; ++which) {
        if (e.name != (which ? "v/" : "m/") + params_[i].name) continue;
        if (e.value.shape() != params_[i].value.shape())
          throw FormatError("optimizer state " + e.name + " has dims " + to_string(e.value.shape()));
        (which ? v : m)[i] = e.value.to(params_[i].value.dtype());
        known = true;
        break;
      }
    }
    if (!known) throw FormatError("optimizer state has unknown entry " + e.name);
  }
  if (!step) throw FormatError("optimizer state is missing entry step");
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (!m[i].defined() || !v[i].defined())
      throw FormatError("optimizer state is missing moments for " + params_[i].name);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    m_[i].copy_from(m[i]);
    v_[i].copy_from(v[i]);
  }
  step_ = *step;
}

// ---- schedule ----

LrSchedule LrSchedule::for_steps(std::int64_t total) {
  LrSchedule s;
  s.total_steps = total;
  s.warmup_steps = std::max<std::int64_t>(1, total / 10);
  if (s.warmup_steps >= total) s.warmup_steps = total - 1;
  return s;
}

void LrSchedule::validate() const {
  if (!(start < peak)) throw SpecError("lr schedule: start must be below peak");
  if (warmup_steps < 0 || warmup_steps >= total_steps)
    throw SpecError("lr schedule: warmup steps must be below total steps");
}

double LrSchedule::at(std::int64_t step) const {
  step = std::clamp<std::int64_t>(step, 0, total_steps);
  if (step < warmup_steps)
    return start + (peak - start) * static_cast<double>(step) / static_cast<double>(warmup_steps);
  const double t = static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
  return peak * std::pow(1.0 - t, power);
}

// ---- trainer ----

namespace {

std::vector<Tensor> buffer_copies(const GmlnModel& m) {
  std::vector<Tensor> out;
  for (const auto& e : m.registry().entries())
    if (e.buffer) out.push_back(e.value.clone());
  return out;
}

void restore_buffers(GmlnModel& m, const std::vector<Tensor>& saved) {
  std::size_t k = 0;
  for (const auto& e : m.registry().entries())
    if (e.buffer) {
      Tensor t = e.value;
      t.copy_from(saved[k++]);
    }
}

bool finite(double v) { return std::isfinite(v); }

}  // namespace

Trainer::Trainer(GmlnModel& model, std::vector<const Study*> data, TrainConfig cfg)
    : model_(model),
      data_(std::move(data)),
      cfg_(std::move(cfg)),
      schedule_(cfg_.schedule ? *cfg_.schedule : LrSchedule::for_steps(std::max<std::int64_t>(cfg_.steps, 2))),
      optimizer_(model.registry().parameters(), cfg_.adamw) {
  if (data_.empty()) throw ContractError("train: dataset is empty");
  if (cfg_.batch_size < 1) throw SpecError("train: batch size must be positive");
  if (cfg_.steps < 1) throw SpecError("train: steps must be positive");
  if (!cfg_.constant_lr) schedule_.validate();
  cfg_.loss.validate();
  for (const auto* s : data_)
    if (!s->labels) throw DataError("train: study " + s->id + " has no labels");
}

double Trainer::lr_for(std::int64_t step) const {
  return cfg_.constant_lr ? *cfg_.constant_lr : schedule_.at(step);
}

std::vector<std::size_t> Trainer::batch_indices(std::int64_t step) const {
  const auto n = static_cast<std::int64_t>(data_.size());
  std::vector<std::size_t> out;
  std::int64_t cached_epoch = -1;
  std::vector<std::size_t> perm;
  for (int b = 0; b < cfg_.batch_size; ++b) {
    const std::int64_t k = step * cfg_.batch_size + b;
    const std::int64_t epoch = k / n;
    if (epoch != cached_epoch) {
      perm.resize(static_cast<std::size_t>(n));
      for (std::int64_t i = 0; i < n; ++i) perm[i] = static_cast<std::size_t>(i);
      Rng rng(cfg_.seed, "epoch/" + std::to_string(epoch));
      for (std::int64_t i = n - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
      cached_epoch = epoch;
    }
    out.push_back(perm[static_cast<std::size_t>(k % n)]);
  }
  return out;
}

std::string Trainer::metrics_line(const StepRecord& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%lld,%.9g,%.9g,%.9g,%.9g", static_cast<long long>(r.step), r.lr,
                r.total, r.dice, r.ce);
  return buf;
}

StepRecord Trainer::step() {
  const std::int64_t s = completed();
  std::vector<const Study*> batch;
  for (auto i : batch_indices(s)) batch.push_back(data_[i]);
  const auto x = batch_inputs(batch, model_.config().dtype);
  const auto labels = batch_labels(batch);

  const auto saved = buffer_copies(model_);
  Tape tape;
  Context ctx{&tape, true};
  auto logits = model_.forward(ctx, constant(x));
  auto loss = dice_ce_loss(logits, labels, cfg_.loss);
  const double total = loss.total.value.item();
  if (!finite(total)) {
    restore_buffers(model_, saved);
    throw NumericError("train: non-finite loss at step " + std::to_string(s + 1));
  }
  tape.backward(loss.total);
  const double lr = lr_for(s);
  const auto res = optimizer_.step(tape, lr);
  if (!res.applied) {
    restore_buffers(model_, saved);
    throw NumericError("train: step " + std::to_string(s + 1) + " aborted: " + res.reason);
  }
  StepRecord rec{s + 1, lr, total, loss.dice, loss.ce};
  history_.push_back(rec);
  if (!cfg_.out_dir.empty()) {
    fs::create_directories(cfg_.out_dir);
    std::ofstream log(fs::path(cfg_.out_dir) / "metrics.log", std::ios::app);
    log << metrics_line(rec) << "\n";
    if (cfg_.checkpoint_every > 0 && rec.step % cfg_.checkpoint_every == 0) save();
  }
  return rec;
}

std::vector<StepRecord> Trainer::run(const std::function<void(const StepRecord&)>& on_step) {
  std::vector<StepRecord> out;
  while (completed() < cfg_.steps) {
    out.push_back(step());
    if (on_step) on_step(out.back());
  }
  if (!cfg_.out_dir.empty() && (cfg_.checkpoint_every <= 0 || completed() % cfg_.checkpoint_every != 0))
    save();
  return out;
}

void Trainer::save() const {
  if (cfg_.out_dir.empty()) return;
  const fs::path dir(cfg_.out_dir);
  const auto model_bytes = encode_checkpoint(snapshot(model_));
  char name[64];
  std::snprintf(name, sizeof name, "step_%06lld.vckp", static_cast<long long>(completed()));
  binio::write_file_atomic((dir / name).string(), model_bytes);
  binio::write_file_atomic((dir / "checkpoint.optim.vckp").string(), encode_checkpoint(optimizer_.state()));
  binio::write_file_atomic((dir / "checkpoint.vckp").string(), model_bytes);
}

void Trainer::resume(const std::string& dir) {
  const fs::path d(dir);
  auto model_file = read_checkpoint((d / "checkpoint.vckp").string());
  auto optim_file = read_checkpoint((d / "checkpoint.optim.vckp").string());
  restore(model_, model_file);
  optimizer_.load_state(optim_file);
  history_.clear();
  if (cfg_.out_dir.empty()) return;
  const auto log_path = fs::path(cfg_.out_dir) / "metrics.log";
  if (!fs::exists(log_path)) return;
  std::ifstream in(log_path);
  std::ostringstream kept;
  std::string line;
  for (std::int64_t i = 0; i < completed() && std::getline(in, line); ++i) kept << line << "\n";
  in.close();
  binio::write_file_atomic(log_path.string(), kept.str());
}

double evaluate_loss(const GmlnModel& model, std::span<const Study* const> data,
                     const LossConfig& cfg, int batch_size) {
  if (data.empty()) throw ContractError("evaluate_loss: empty dataset");
  double acc = 0;
  std::size_t seen = 0;
  for (std::size_t i = 0; i < data.size(); i += static_cast<std::size_t>(batch_size)) {
    auto batch = data.subspan(i, std::min<std::size_t>(static_cast<std::size_t>(batch_size), data.size() - i));
    const auto x = batch_inputs(batch, model.config().dtype);
    const auto labels = batch_labels(batch);
    Context ctx;
    auto loss = dice_ce_loss(model.forward(ctx, constant(x)), labels, cfg);
    acc += loss.total.value.item() * static_cast<double>(batch.size());
    seen += batch.size();
  }
  return acc / static_cast<double>(seen);
}

}  // namespace gmln
