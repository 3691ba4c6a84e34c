#include "bnnkh/engine.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>

#include "bnnkh/error.hpp"
#include "bnnkh/parallel.hpp"

namespace bnnkh {
namespace {

constexpr std::size_t kShard = 256;
constexpr std::size_t kLanes = 32;

std::int16_t clamp16(std::int32_t v) {
  return static_cast<std::int16_t>(std::clamp<std::int32_t>(v, std::numeric_limits<std::int16_t>::min(),
                                                            std::numeric_limits<std::int16_t>::max()));
}

void check_flips(std::span<const KeyFlip> flips, const std::vector<std::vector<std::uint8_t>>& bits) {
  for (std::size_t f = 0; f < flips.size(); ++f) {
    if (flips[f].layer >= bits.size() || flips[f].pair >= bits[flips[f].layer].size()) {
      throw ArgumentError("key flip out of range");
    }
    if (f > 0 && !(flips[f - 1] < flips[f])) throw ArgumentError("key flips must be sorted and unique");
  }
}

}  // namespace

// Same expression as bn_affine with the square root hoisted, so scores are
// bit-identical to output_score.
void CandidateEvaluator::output_scores(const Layer& layer, const std::int16_t* pre,
                                       std::vector<double>& scores) const {
  if (!layer.source.bn) {
    for (std::size_t k = 0; k < layer.out; ++k) scores[k] = pre[k];
    return;
  }
  const auto& bn = *layer.source.bn;
  for (std::size_t k = 0; k < layer.out; ++k) {
    scores[k] = static_cast<double>(bn.gamma[k]) * (static_cast<double>(pre[k]) - static_cast<double>(bn.mean[k])) /
                    layer.out_denominator[k] +
                static_cast<double>(bn.beta[k]);
  }
}

CandidateEvaluator::Workspace::Workspace(const CandidateEvaluator& owner)
    : pre(owner.max_dim_),
      act(owner.max_dim_),
      dense(owner.max_dim_),
      changed_index(owner.max_dim_),
      next_index(owner.max_dim_),
      changed_value(owner.max_dim_),
      next_value(owner.max_dim_),
      packed(owner.max_dim_),
      scores(owner.layers_.back().out) {
  for (const auto& bits : owner.base_bits_) flip_mask.emplace_back(bits.size(), 0);
  flipped.resize(owner.base_bits_.size());
}

CandidateEvaluator::CandidateEvaluator(const BnnModel& encrypted, const LabeledDataset& data,
                                       const KeySet& base) {
  encrypted.validate();
  if (data.empty()) throw ArgumentError("candidate evaluation needs at least one sample");
  if (data.image_size() != encrypted.input_dim()) {
    throw ArgumentError("dataset images have " + std::to_string(data.image_size()) +
                        " pixels, model expects " + std::to_string(encrypted.input_dim()));
  }
  const std::size_t hidden = encrypted.layers.size() - 1;
  if (base.size() != hidden) throw ArgumentError("base key set does not match hidden layer count");

  for (std::size_t l = 0; l < encrypted.layers.size(); ++l) {
    const auto& src = encrypted.layers[l];
    Layer layer;
    layer.weights = src.weights;
    layer.in = src.in_dim();
    layer.out = src.out_dim();
    layer.hidden = src.binarized_output;
    if (layer.in > static_cast<std::size_t>(std::numeric_limits<std::int16_t>::max())) {
      throw ArgumentError("layer too wide for 16-bit preactivations");
    }
    if (layer.hidden) {
      if (layer.out % 2 != 0) throw ArgumentError("hidden layer with odd width cannot be keyed");
      if (base.keys[l].size() != layer.out / 2) throw ArgumentError("base key length mismatch");
      const auto th = compile_thresholds(src);
      layer.lo.resize(layer.out);
      layer.hi.resize(layer.out);
      for (std::size_t k = 0; k < layer.out; ++k) {
        layer.lo[k] = clamp16(th[k].lo);
        layer.hi[k] = clamp16(th[k].hi);
        // An empty interval must stay empty after clamping.
        if (th[k].lo > th[k].hi) {
          layer.lo[k] = 1;
          layer.hi[k] = 0;
        }
      }
      base_bits_.emplace_back(base.keys[l].bits().begin(), base.keys[l].bits().end());
    } else {
      layer.source = src;
      if (src.bn) {
        for (std::size_t k = 0; k < layer.out; ++k) {
          layer.out_denominator.push_back(std::sqrt(static_cast<double>(src.bn->variance[k]) +
                                                    static_cast<double>(src.bn->epsilon)));
        }
      }
    }
    if (l > 0) {
      // Columns padded to whole vectors; padding lanes stay zero.
      layer.stride = (layer.out + kLanes - 1) / kLanes * kLanes;
      layer.delta2.assign(layer.in * layer.stride, 0);
      for (std::size_t j = 0; j < layer.out; ++j) {
        for (std::size_t i = 0; i < layer.in; ++i) {
          layer.delta2[i * layer.stride + j] = static_cast<std::int16_t>(2 * src.weights.weight(j, i));
        }
      }
    }
    max_dim_ = std::max({max_dim_, layer.in, layer.stride, layer.out});
    layers_.push_back(std::move(layer));
  }

  input_words_ = words_for_bits(encrypted.input_dim());
  inputs_.resize(data.size() * input_words_);
  for (std::size_t s = 0; s < data.size(); ++s) {
    const auto bits = binarize_input(data.image(s));
    std::copy(bits.words.begin(), bits.words.end(), inputs_.begin() + static_cast<std::ptrdiff_t>(s * input_words_));
  }
  labels_ = data.labels;
  rebuild(1);
}

KeySet CandidateEvaluator::base_keys() const {
  KeySet set;
  for (const auto& bits : base_bits_) set.keys.emplace_back(bits);
  set.shared = std::all_of(set.keys.begin(), set.keys.end(),
                           [&](const PufKey& k) { return k == set.keys.front(); });
  return set;
}

Accuracy CandidateEvaluator::base_accuracy() const {
  Accuracy acc;
  acc.total = labels_.size();
  for (auto c : state_.correct) acc.correct += c;
  return acc;
}

CandidateEvaluator::SampleState CandidateEvaluator::fresh_state() const {
  const std::size_t n = labels_.size();
  SampleState state;
  state.pre.resize(layers_.size());
  state.act.resize(layers_.size());
  state.x.resize(layers_.size());
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    state.pre[l].assign(n * layers_[l].out, 0);
    if (layers_[l].hidden) state.act[l].assign(n * layers_[l].out, 0);
    if (l > 0) state.x[l].assign(n * layers_[l].in, 0);
  }
  state.correct.assign(n, 0);
  return state;
}

void CandidateEvaluator::full_forward(std::size_t s, SampleState& state, Workspace& ws) const {
  PackedBits& cur = ws.packed;
  cur.size = layers_.front().in;
  std::fill(cur.words.begin(), cur.words.end(), 0);
  std::copy_n(inputs_.begin() + static_cast<std::ptrdiff_t>(s * input_words_), input_words_, cur.words.begin());

  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const Layer& layer = layers_[l];
    std::int16_t* pre = state.pre[l].data() + s * layer.out;
    for (std::size_t j = 0; j < layer.out; ++j) {
      pre[j] = static_cast<std::int16_t>(xnor_dot(layer.weights.row(j), cur.words, layer.in));
    }
    if (!layer.hidden) {
      output_scores(layer, pre, ws.scores);
      state.correct[s] = argmax_lowest(ws.scores) == labels_[s];
      return;
    }
    std::int8_t* act = state.act[l].data() + s * layer.out;
    for (std::size_t k = 0; k < layer.out; ++k) {
      act[k] = pre[k] >= layer.lo[k] && pre[k] <= layer.hi[k] ? 1 : -1;
    }
    std::int8_t* next = state.x[l + 1].data() + s * layer.out;
    const auto& bits = base_bits_[l];
    for (std::size_t k = 0; k < bits.size(); ++k) {
      next[2 * k] = act[2 * k + bits[k]];
      next[2 * k + 1] = act[2 * k + 1 - bits[k]];
    }
    cur.size = layer.out;
    std::fill(cur.words.begin(), cur.words.end(), 0);
    for (std::size_t p = 0; p < layer.out; ++p) {
      if (next[p] > 0) cur.words[p / 64] |= std::uint64_t{1} << (p % 64);
    }
  }
}

void CandidateEvaluator::rebuild(std::size_t threads) {
  SampleState state = fresh_state();
  const std::size_t shards = (labels_.size() + kShard - 1) / kShard;
  std::vector<Workspace> spaces;
  const std::size_t workers = std::min(resolve_threads(threads), shards);
  for (std::size_t w = 0; w < workers; ++w) spaces.emplace_back(*this);
  parallel_for(shards, workers, [&](std::size_t worker, std::size_t shard) {
    const std::size_t end = std::min(labels_.size(), (shard + 1) * kShard);
    for (std::size_t s = shard * kShard; s < end; ++s) full_forward(s, state, spaces[worker]);
  });
  state_ = std::move(state);
}

bool CandidateEvaluator::state_consistent() const {
  SampleState state = fresh_state();
  Workspace ws(*this);
  for (std::size_t s = 0; s < labels_.size(); ++s) full_forward(s, state, ws);
  return state == state_;
}

void CandidateEvaluator::prepare_masks(std::span<const KeyFlip> flips, Workspace& ws) const {
  for (const auto& f : flips) {
    ws.flip_mask[f.layer][f.pair] = 1;
    ws.flipped[f.layer].push_back(f.pair);
  }
}

void CandidateEvaluator::clear_masks(std::span<const KeyFlip> flips, Workspace& ws) const {
  for (const auto& f : flips) ws.flip_mask[f.layer][f.pair] = 0;
  for (auto& list : ws.flipped) list.clear();
}

bool CandidateEvaluator::run_sample(std::size_t s, std::uint32_t last_flip_layer, Workspace& ws,
                                    const SampleState& state, SampleState* commit) const {
  std::size_t changed = 0;  // entries of ws.changed_index/value: inputs of layer l that differ from base
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const Layer& layer = layers_[l];
    if (changed == 0 && l > last_flip_layer) return state.correct[s] != 0;

    const std::int16_t* base_pre = state.pre[l].data() + s * layer.out;
    const std::int16_t* pre = base_pre;
    if (changed != 0) {
      std::int16_t* buf = ws.pre.data();
      if (changed * 4 <= layer.in) {
        std::copy_n(base_pre, layer.out, buf);
        const std::size_t stride = layer.stride;
        for (std::size_t c = 0; c < changed; ++c) {
          const std::int16_t* col = layer.delta2.data() + std::size_t{ws.changed_index[c]} * stride;
          if (ws.changed_value[c] > 0) {
            for (std::size_t j = 0; j < stride; ++j) buf[j] = static_cast<std::int16_t>(buf[j] + col[j]);
          } else {
            for (std::size_t j = 0; j < stride; ++j) buf[j] = static_cast<std::int16_t>(buf[j] - col[j]);
          }
        }
      } else {
        const std::int8_t* base_x = state.x[l].data() + s * layer.in;
        std::copy_n(base_x, layer.in, ws.dense.data());
        for (std::size_t c = 0; c < changed; ++c) ws.dense[ws.changed_index[c]] = ws.changed_value[c];
        PackedBits& packed = ws.packed;
        std::fill(packed.words.begin(), packed.words.end(), 0);
        for (std::size_t i = 0; i < layer.in; ++i) {
          if (ws.dense[i] > 0) packed.words[i / 64] |= std::uint64_t{1} << (i % 64);
        }
        for (std::size_t j = 0; j < layer.out; ++j) {
          buf[j] = static_cast<std::int16_t>(xnor_dot(layer.weights.row(j), packed.words, layer.in));
        }
      }
      pre = buf;
    }

    if (!layer.hidden) {
      output_scores(layer, pre, ws.scores);
      const bool ok = argmax_lowest(ws.scores) == labels_[s];
      if (commit) {
        if (pre != base_pre) std::copy_n(pre, layer.out, commit->pre[l].data() + s * layer.out);
        commit->correct[s] = ok;
      }
      return ok;
    }

    const std::int8_t* base_act = state.act[l].data() + s * layer.out;
    const std::int8_t* act = base_act;
    if (changed != 0) {
      std::int8_t* buf = ws.act.data();
      const std::int16_t* lo = layer.lo.data();
      const std::int16_t* hi = layer.hi.data();
      const std::size_t out = layer.out;  // int8 stores may alias members
      for (std::size_t k = 0; k < out; ++k) {
        buf[k] = static_cast<std::int8_t>((pre[k] >= lo[k]) & (pre[k] <= hi[k]) ? 1 : -1);
      }
      act = buf;
    }

    const std::int8_t* base_next = state.x[l + 1].data() + s * layer.out;
    const auto& bits = base_bits_[l];
    const auto& mask = ws.flip_mask[l];
    std::size_t next = 0;
    auto emit = [&](std::size_t p, std::int8_t v) {
      ws.next_index[next] = static_cast<std::uint16_t>(p);
      ws.next_value[next++] = v;
    };
    // Pairs flipped at this layer: both decrypted positions may move.
    for (std::uint32_t k : ws.flipped[l]) {
      const std::size_t b = bits[k] ^ 1U;
      const std::int8_t v0 = act[2 * k + b];
      const std::int8_t v1 = act[2 * k + 1 - b];
      if (v0 != base_next[2 * k]) emit(2 * k, v0);
      if (v1 != base_next[2 * k + 1]) emit(2 * k + 1, v1);
    }
    // Elsewhere a changed activation j lands at decrypted position j ^ bits[j / 2].
    if (changed != 0) {
      for (std::size_t w = 0; w < layer.out; w += 64) {
        const std::size_t width = std::min<std::size_t>(64, layer.out - w);
        std::uint64_t diff = 0;
        for (std::size_t j = 0; j < width; ++j) {
          diff |= static_cast<std::uint64_t>(act[w + j] != base_act[w + j]) << j;
        }
        while (diff != 0) {
          const std::size_t j = w + static_cast<std::size_t>(std::countr_zero(diff));
          diff &= diff - 1;
          const std::size_t k = j / 2;
          if (!mask[k]) emit(j ^ bits[k], act[j]);
        }
      }
    }

    if (commit) {
      if (pre != base_pre) std::copy_n(pre, layer.out, commit->pre[l].data() + s * layer.out);
      if (act != base_act) std::copy_n(act, layer.out, commit->act[l].data() + s * layer.out);
      std::int8_t* dst = commit->x[l + 1].data() + s * layer.out;
      for (std::size_t c = 0; c < next; ++c) dst[ws.next_index[c]] = ws.next_value[c];
    }
    std::swap(ws.changed_index, ws.next_index);
    std::swap(ws.changed_value, ws.next_value);
    changed = next;
  }
  return state.correct[s] != 0;
}

std::size_t CandidateEvaluator::count_correct(std::span<const KeyFlip> flips, std::size_t begin,
                                              std::size_t end, Workspace& ws) const {
  end = std::min(end, labels_.size());
  std::size_t hits = 0;
  if (flips.empty()) {
    for (std::size_t s = begin; s < end; ++s) hits += state_.correct[s];
    return hits;
  }
  prepare_masks(flips, ws);
  const std::uint32_t last = flips.back().layer;
  for (std::size_t s = begin; s < end; ++s) hits += run_sample(s, last, ws, state_, nullptr);
  clear_masks(flips, ws);
  return hits;
}

std::vector<Accuracy> CandidateEvaluator::evaluate(std::span<const std::vector<KeyFlip>> candidates,
                                                   std::size_t threads) const {
  for (const auto& c : candidates) check_flips(c, base_bits_);
  const std::size_t shards = (labels_.size() + kShard - 1) / kShard;
  const std::size_t items = candidates.size() * shards;
  std::vector<std::size_t> counts(items, 0);
  const std::size_t workers = std::max<std::size_t>(1, std::min(resolve_threads(threads), items));
  std::vector<Workspace> spaces;
  for (std::size_t w = 0; w < workers; ++w) spaces.emplace_back(*this);
  parallel_for(items, workers, [&](std::size_t worker, std::size_t item) {
    const std::size_t cand = item / shards;
    const std::size_t shard = item % shards;
    counts[item] = count_correct(candidates[cand], shard * kShard, (shard + 1) * kShard, spaces[worker]);
  });
  std::vector<Accuracy> out(candidates.size());
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    out[c].total = labels_.size();
    for (std::size_t s = 0; s < shards; ++s) out[c].correct += counts[c * shards + s];
  }
  return out;
}

void CandidateEvaluator::commit(std::span<const KeyFlip> flips, std::size_t threads) {
  check_flips(flips, base_bits_);
  if (flips.empty()) return;
  const std::size_t shards = (labels_.size() + kShard - 1) / kShard;
  const std::size_t workers = std::min(resolve_threads(threads), shards);
  std::vector<Workspace> spaces;
  for (std::size_t w = 0; w < workers; ++w) spaces.emplace_back(*this);
  for (auto& ws : spaces) prepare_masks(flips, ws);
  const std::uint32_t last = flips.back().layer;
  parallel_for(shards, workers, [&](std::size_t worker, std::size_t shard) {
    const std::size_t end = std::min(labels_.size(), (shard + 1) * kShard);
    for (std::size_t s = shard * kShard; s < end; ++s) run_sample(s, last, spaces[worker], state_, &state_);
  });
  for (const auto& f : flips) base_bits_[f.layer][f.pair] ^= 1;
}

}  // namespace bnnkh
