#pragma once

// Full localization model (encoders -> positional codes -> AST stack) and
// checkpoint persistence.

#include <filesystem>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "tavlo/ast_attention.hpp"
#include "tavlo/config.hpp"
#include "tavlo/dataset.hpp"
#include "tavlo/encoders.hpp"
#include "tavlo/nn.hpp"
#include "tavlo/objective.hpp"
#include "tavlo/tensor_io.hpp"

namespace tavlo {

namespace fs = std::filesystem;
using ad::Var;

template <class S>
class Model {
 public:
  cfg::ModelConfig config;
  nn::ParameterSet<S> params;
  enc::VisualEncoder<S> visual;
  enc::AudioEncoder<S> audio;
  enc::PositionalEncodings<S> pos;
  ast::ASTStack<S> ast;

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  static std::unique_ptr<Model> make(cfg::ModelConfig mc, std::uint64_t seed) {
    mc.encoder.spec_steps = cfg::spectrogram_steps(mc.spectrogram);
    mc.encoder.n_freq_bins = mc.spectrogram.n_freq_bins;
    std::unique_ptr<Model> m(new Model());
    m->config = mc;
    std::mt19937_64 rng(seed);
    const auto& e = mc.encoder;
    m->visual = enc::VisualEncoder<S>::make(m->params, e, rng);
    m->audio = enc::AudioEncoder<S>::make(m->params, e, rng);
    m->pos = e.learned_positional
                 ? enc::PositionalEncodings<S>::learned(m->params, e.T, e.grid_h(), e.grid_w(),
                                                        e.d_f, e.d_t, e.positional_scale)
                 : enc::PositionalEncodings<S>::fixed(e.T, e.grid_h(), e.grid_w(), e.d_f, e.d_t,
                                                      e.positional_scale);
    m->ast = ast::ASTStack<S>::make(m->params, e.d_model(), mc.ast, rng);
    return m;
  }

  // frames [B, T, Hv, Wv, 3], spec [B, Ha, Wa] -> audio [B, T, D], visual [B, T, H, W, D]
  ast::SplitOutput<S> forward(const Var<S>& frames, const Var<S>& spec,
                              std::mt19937_64* dropout_rng = nullptr) const {
    auto v = visual(frames);
    auto a = audio(spec);
    const auto pair = enc::apply_positional(v, a, pos);
    const auto z = ast::ast_forward(ast::build_joint(pair), ast, dropout_rng);
    return ast::split_output(z, v.shape()[2], v.shape()[3]);
  }

 private:
  Model() = default;
};

// Stacks the listed clips into [B, ...] batch tensors.
template <class S>
std::pair<Tensor<S>, Tensor<S>> make_batch(const data::Dataset& ds,
                                           const std::vector<std::size_t>& ids) {
  if (ids.empty()) throw EmptySetError("make_batch: empty batch");
  const auto& f0 = ds[ids[0]].frames;
  const auto& s0 = ds[ids[0]].spec;
  Shape fs{ids.size()};
  fs.insert(fs.end(), f0.shape().begin(), f0.shape().end());
  Shape ss{ids.size()};
  ss.insert(ss.end(), s0.shape().begin(), s0.shape().end());
  Tensor<S> frames(fs), spec(ss);
  for (std::size_t b = 0; b < ids.size(); ++b) {
    const auto& c = ds[ids[b]];
    if (c.frames.shape() != f0.shape() || c.spec.shape() != s0.shape())
      throw DataError("make_batch: clip " + c.clip_id + " has a different shape");
    for (std::size_t i = 0; i < f0.size(); ++i) frames[b * f0.size() + i] = S(c.frames[i]);
    for (std::size_t i = 0; i < s0.size(); ++i) spec[b * s0.size() + i] = S(c.spec[i]);
  }
  return {std::move(frames), std::move(spec)};
}

struct History {
  std::vector<double> loss;                               // per step
  std::vector<std::pair<std::size_t, double>> val_ciou;  // (step, total CIoU)

  bool operator==(const History&) const = default;
};

template <class S>
struct TrainState {
  std::unique_ptr<Model<S>> model;
  nn::Adam<S> adam;
  std::size_t step = 0;
  History history;
  cfg::RunConfig config;
};

inline constexpr const char* kCheckpointFormat = "tavlo-checkpoint/1";

template <class S>
io::KeyedTensors checkpoint_tensors(const TrainState<S>& st) {
  io::KeyedTensors kv;
  kv.put_text("meta/format", kCheckpointFormat);
  kv.put_text("meta/config", cfg::to_json(st.config).dump(2));
  kv.put_text("meta/step", std::to_string(st.step));
  const auto& adam = st.adam;
  const auto& entries = st.model->params.entries();
  const bool has_moments = adam.first_moments().size() == entries.size();
  for (std::size_t k = 0; k < entries.size(); ++k) {
    const auto& [name, v] = entries[k];
    kv.put("param/" + name, v.value());
    if (has_moments) {
      kv.put("adam/m/" + name, adam.first_moments()[k]);
      kv.put("adam/v/" + name, adam.second_moments()[k]);
    }
  }
  kv.put_text("adam/steps", std::to_string(adam.steps()));
  Tensor<double> loss({st.history.loss.size()});
  std::copy(st.history.loss.begin(), st.history.loss.end(), loss.data());
  kv.put("history/loss", loss);
  Tensor<double> val({st.history.val_ciou.size(), 2});
  for (std::size_t i = 0; i < st.history.val_ciou.size(); ++i) {
    val[2 * i] = double(st.history.val_ciou[i].first);
    val[2 * i + 1] = st.history.val_ciou[i].second;
  }
  kv.put("history/val_ciou", val);
  return kv;
}

template <class S>
void save_checkpoint(const fs::path& p, const TrainState<S>& st) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  // write-then-rename keeps the previous checkpoint intact on failure
  const fs::path tmp = fs::path(p).concat(".tmp");
  checkpoint_tensors(st).save(tmp);
  fs::rename(tmp, p);
}

template <class S>
TrainState<S> load_checkpoint(const fs::path& p) {
  const auto kv = io::KeyedTensors::load(p);
  if (!kv.contains("meta/format") || kv.get_text("meta/format") != kCheckpointFormat)
    throw DataError(p.string() + ": not a checkpoint");
  TrainState<S> st;
  st.config = cfg::parse_config(nlohmann::json::parse(kv.get_text("meta/config")));
  st.model = Model<S>::make(st.config.model, st.config.optimizer.seed);
  st.step = std::stoull(kv.get_text("meta/step"));
  auto& entries = st.model->params.entries();
  for (auto& [name, v] : entries) {
    const auto& f = kv.frame("param/" + name);
    if (f.dtype != io::dtype_of<S>())
      throw DataError("checkpoint parameter " + name + " has a different precision");
    v.mutable_value() = kv.get<S>("param/" + name, v.shape());
  }
  nn::AdamOptions ao;
  ao.lr = st.config.optimizer.lr;
  ao.weight_decay = st.config.optimizer.weight_decay;
  ao.grad_clip = st.config.optimizer.grad_clip;
  st.adam = nn::Adam<S>(st.model->params, ao);
  if (kv.contains("adam/m/" + entries.front().first))
    for (std::size_t k = 0; k < entries.size(); ++k) {
      st.adam.first_moments()[k] = kv.get<S>("adam/m/" + entries[k].first, entries[k].second.shape());
      st.adam.second_moments()[k] =
          kv.get<S>("adam/v/" + entries[k].first, entries[k].second.shape());
    }
  st.adam.set_steps(std::stoull(kv.get_text("adam/steps")));
  const auto loss = kv.get<double>("history/loss");
  st.history.loss.assign(loss.data(), loss.data() + loss.size());
  const auto& vf = kv.frame("history/val_ciou");
  const auto val = vf.as<double>();
  for (std::size_t i = 0; i + 1 < val.size(); i += 2)
    st.history.val_ciou.emplace_back(std::size_t(val[i]), val[i + 1]);
  return st;
}

}  // namespace tavlo
