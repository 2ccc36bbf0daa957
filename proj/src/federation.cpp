// Copyright 2026 The dualfed Authors
// SPDX-License-Identifier: Apache-2.0

#include "dualfed/federation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>
#include <thread>

namespace dualfed {

std::string to_string(PayloadKind k) {
  switch (k) {
    case PayloadKind::kLoraDelta: return "lora_delta";
    case PayloadKind::kEmbeddings: return "embeddings";
    case PayloadKind::kTrainAccuracy: return "train_accuracy";
    case PayloadKind::kSampleCount: return "sample_count";
  }
  return "?";
}

void Channel::upload(ClientMessage msg) {
  std::lock_guard<std::mutex> lock(mu_);
  if (audit_) audit_(msg);
  bytes_ += msg.payload.bytes.size();
  queue_.emplace_back(sequence_++, std::move(msg));
}

std::vector<ClientMessage> Channel::drain() {
  std::lock_guard<std::mutex> lock(mu_);
  std::stable_sort(queue_.begin(), queue_.end(), [](const auto& a, const auto& b) {
    return a.second.client_id < b.second.client_id;
  });
  std::vector<ClientMessage> out;
  out.reserve(queue_.size());
  for (auto& entry : queue_) out.push_back(std::move(entry.second));
  queue_.clear();
  return out;
}

namespace {

std::vector<const Matrix*> const_params(EncoderStack& stack) {
  std::vector<const Matrix*> out;
  for (Matrix* m : stack.lora_parameters()) out.push_back(m);
  return out;
}

}  // namespace

ServerState::ServerState(EncoderStack image_template, EncoderStack text, const ClassTextBank& bank,
                         std::vector<int> base_classes)
    : image_template_(std::move(image_template)),
      global_lora_(image_template_.lora()),
      text_(std::move(text)),
      bank_(&bank),
      base_classes_(std::move(base_classes)) {
  text_adam_ = AdamState(const_params(text_));
  text_embeddings_ = encode_all_text(text_, *bank_);
}

void ServerState::set_global_lora(LoraDelta delta) {
  global_lora_.require_same_shape(delta, "ServerState::set_global_lora");
  global_lora_ = std::move(delta);
}

void ServerState::set_sft_checkpoint(LoraDelta delta) {
  if (sft_checkpoint_) throw std::logic_error("SFT checkpoint is already set");
  global_lora_.require_same_shape(delta, "ServerState::set_sft_checkpoint");
  sft_checkpoint_ = std::move(delta);
}

EncoderStack ServerState::global_image() const {
  EncoderStack out = image_template_;
  out.set_lora(global_lora_);
  return out;
}

Matrix ServerState::base_text_embeddings() const { return text_embeddings_(Eigen::all, base_classes_); }

void ServerState::refresh_text_embeddings() {
  text_embeddings_ = encode_all_text(text_, *bank_);
  ++text_version_;
}

Broadcast ServerState::make_broadcast(int round) const {
  Broadcast b;
  b.round = round;
  b.global_lora = serialize_lora(global_lora_);
  b.text_embeddings = serialize_embeddings({base_text_embeddings(), base_classes_});
  b.text_version = text_version_;
  if (sft_checkpoint_) b.sft_checkpoint = serialize_lora(*sft_checkpoint_);
  return b;
}

LoraDelta aggregate_lora(const std::vector<LoraDelta>& deltas, const std::vector<std::size_t>& sizes) {
  if (deltas.empty()) throw std::invalid_argument("aggregate_lora: no client deltas");
  if (deltas.size() != sizes.size()) throw ShapeError("aggregate_lora: one size per delta required");
  for (const LoraDelta& d : deltas) deltas.front().require_same_shape(d, "aggregate_lora");
  const double total = static_cast<double>(std::accumulate(sizes.begin(), sizes.end(), std::size_t{0}));
  if (total <= 0.0) throw std::invalid_argument("aggregate_lora: total sample count is zero");
  LoraDelta out = deltas.front().zeros_like();
  for (std::size_t k = 0; k < deltas.size(); ++k) {
    out.add_scaled(deltas[k], static_cast<double>(sizes[k]) / total);
  }
  return out;
}

EmbeddingBatch select_upload_embeddings(const Matrix& embeddings, const std::vector<int>& labels,
                                        const UploadPolicy& policy, Rng& rng) {
  policy.validate();
  if (static_cast<Eigen::Index>(labels.size()) != embeddings.cols()) {
    throw ShapeError("select_upload_embeddings: one label per embedding required");
  }
  const std::size_t n = labels.size();
  std::vector<std::size_t> chosen(n);
  std::iota(chosen.begin(), chosen.end(), std::size_t{0});

  if (policy.ratio < 1.0) {
    shuffle_in_place(chosen, rng);
    const auto m = static_cast<std::size_t>(std::ceil(policy.ratio * static_cast<double>(n) - 1e-9));
    chosen.resize(std::min(n, m));
    std::sort(chosen.begin(), chosen.end());
  }

  // per class, in ascending class order
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i : chosen) by_class[labels[i]].push_back(i);

  if (policy.per_class_cap) {
    chosen.clear();
    for (auto& [c, idx] : by_class) {
      const auto cap = static_cast<std::size_t>(*policy.per_class_cap);
      if (idx.size() > cap) {
        shuffle_in_place(idx, rng);
        idx.resize(cap);
        std::sort(idx.begin(), idx.end());
      }
      chosen.insert(chosen.end(), idx.begin(), idx.end());
    }
    std::sort(chosen.begin(), chosen.end());
  }

  EmbeddingBatch out;
  if (policy.groups) {
    std::vector<Vector> means;
    for (auto& [c, idx] : by_class) {
      if (policy.per_class_cap) {
        idx.erase(std::remove_if(idx.begin(), idx.end(),
                                 [&](std::size_t i) { return !std::binary_search(chosen.begin(), chosen.end(), i); }),
                  idx.end());
      }
      if (idx.empty()) continue;
      shuffle_in_place(idx, rng);
      const std::size_t g = std::min(idx.size(), static_cast<std::size_t>(*policy.groups));
      for (std::size_t j = 0; j < g; ++j) {
        // near-equal contiguous chunks
        const std::size_t lo = j * idx.size() / g;
        const std::size_t hi = (j + 1) * idx.size() / g;
        Vector mean = Vector::Zero(embeddings.rows());
        for (std::size_t p = lo; p < hi; ++p) mean += embeddings.col(static_cast<Eigen::Index>(idx[p]));
        means.push_back(mean / static_cast<double>(hi - lo));
        out.labels.push_back(c);
      }
    }
    out.embeddings.resize(embeddings.rows(), static_cast<Eigen::Index>(means.size()));
    for (std::size_t j = 0; j < means.size(); ++j) out.embeddings.col(static_cast<Eigen::Index>(j)) = means[j];
  } else {
    out.embeddings.resize(embeddings.rows(), static_cast<Eigen::Index>(chosen.size()));
    for (std::size_t j = 0; j < chosen.size(); ++j) {
      out.embeddings.col(static_cast<Eigen::Index>(j)) = embeddings.col(static_cast<Eigen::Index>(chosen[j]));
      out.labels.push_back(labels[chosen[j]]);
    }
  }

  if (policy.noise_sigma && *policy.noise_sigma > 0.0) {
    out.embeddings += gaussian_matrix(rng, out.embeddings.rows(), out.embeddings.cols(), *policy.noise_sigma);
  }
  return out;
}

Tape::Var text_objective(Tape& tape, const EncoderStack& text, const std::vector<Tape::Var>& lora_leaves,
                         const Matrix& raw_text, const Matrix& image_embeddings,
                         const std::vector<int>& targets, double tau) {
  if (raw_text.rows() != text.input_dim()) throw ShapeError("text_objective: raw text dimension mismatch");
  if (image_embeddings.rows() != text.output_dim()) {
    throw ShapeError("text_objective: embedding dimension mismatch");
  }
  const Tape::Var t = tape.normalize_columns(text.forward(tape, tape.constant(raw_text), lora_leaves));
  const Tape::Var sims = tape.matmul(tape.transpose(t), tape.constant(image_embeddings));
  return cross_entropy(tape, tape.log_softmax_columns(sims, tau), targets);
}

TextUpdateStats server_text_update(ServerState& server, const EmbeddingBatch& uploads, double tau,
                                   double learning_rate, int batch_size, int epochs, Rng& rng) {
  TextUpdateStats stats;
  if (uploads.size() == 0) {
    stats.empty_upload = true;
    return stats;
  }
  if (batch_size < 1) throw ConfigError("server_text_update: batch size must be >= 1");
  const auto& base = server.base_classes();
  std::map<int, int> index_of;
  for (std::size_t i = 0; i < base.size(); ++i) index_of[base[i]] = static_cast<int>(i);
  LocalTask task;
  task.features = uploads.embeddings;
  for (int label : uploads.labels) {
    const auto it = index_of.find(label);
    if (it == index_of.end()) {
      throw std::invalid_argument("server_text_update: label " + std::to_string(label) + " is not a base class");
    }
    task.targets.push_back(it->second);
  }
  const Matrix raw_text = server.bank().columns(base);
  EncoderStack& text = server.mutable_text();

  double loss_sum = 0.0;
  std::size_t seen = 0;
  for (int e = 0; e < epochs; ++e) {
    for (const auto& idx : shuffled_batches(task.size(), batch_size, rng)) {
      const LocalTask batch = task.batch(idx);
      Tape tape;
      const auto leaves = text.register_lora(tape);
      const Tape::Var loss = text_objective(tape, text, leaves, raw_text, batch.features, batch.targets, tau);
      ++stats.steps;
      const double l = tape.scalar(loss);
      if (!std::isfinite(l)) {
        ++stats.skipped_steps;
        continue;
      }
      loss_sum += l * static_cast<double>(batch.size());
      seen += batch.size();
      tape.backward(loss);
      std::vector<Matrix> grads;
      for (const auto& leaf : leaves) grads.push_back(tape.grad(leaf));
      if (!adam_step(text.lora_parameters(), grads, server.text_adam(), learning_rate)) ++stats.skipped_steps;
    }
  }
  if (seen > 0) stats.mean_loss = loss_sum / static_cast<double>(seen);
  server.refresh_text_embeddings();
  return stats;
}

namespace {

double local_accuracy(const EncoderStack& image, const LocalTask& task, const Matrix& text_embs) {
  if (task.size() == 0) return 0.0;
  const Matrix sims = text_embs.transpose() * encode_images(image, task.features);
  int hits = 0;
  for (Eigen::Index i = 0; i < sims.cols(); ++i) {
    Eigen::Index best = 0;
    sims.col(i).maxCoeff(&best);
    hits += static_cast<int>(best) == task.targets[static_cast<std::size_t>(i)];
  }
  return static_cast<double>(hits) / static_cast<double>(task.size());
}

void client_update(ClientState& client, const Broadcast& broadcast, const RunConfig& cfg,
                   StageController::Stage stage, Channel& channel) {
  const LoraDelta global = deserialize_lora(broadcast.global_lora);
  client.image.set_lora(global);
  const EmbeddingBatch text = deserialize_embeddings(broadcast.text_embeddings);
  // candidates are the client's own classes
  Matrix text_embs(text.embeddings.rows(), static_cast<Eigen::Index>(client.classes.size()));
  for (std::size_t c = 0; c < client.classes.size(); ++c) {
    const auto it = std::find(text.labels.begin(), text.labels.end(), client.classes[c]);
    if (it == text.labels.end()) throw std::invalid_argument("broadcast lacks class " + std::to_string(client.classes[c]));
    text_embs.col(static_cast<Eigen::Index>(c)) = text.embeddings.col(it - text.labels.begin());
  }
  AdamState adam(const_params(client.image));
  Rng rng = make_rng({cfg.seed, key(Stream::kClientRound), static_cast<std::uint64_t>(client.id),
                      static_cast<std::uint64_t>(broadcast.round)});
  const double tau = cfg.model.tau;
  client.skipped_steps = 0;
  client.last_loss = 0.0;

  if (stage == StageController::Stage::kSft) {
    for (int e = 0; e < cfg.train.sft_epochs; ++e) {
      const SftStats s = sft_epoch(client.image, adam, client.task, text_embs, tau, cfg.train.learning_rate,
                                   cfg.train.batch_size, rng);
      client.last_loss = s.mean_loss;
      client.skipped_steps += s.skipped_steps;
    }
  } else {
    if (!broadcast.sft_checkpoint) throw std::logic_error("RL round without an SFT checkpoint");
    const PolicySnapshot reference =
        build_reference(deserialize_lora(*broadcast.sft_checkpoint), global, cfg.reference);
    const RlStats s = rl_epoch(client.image, adam, client.task, text_embs, tau, reference, cfg.rl,
                               cfg.train.learning_rate, cfg.train.batch_size, rng);
    client.last_loss = s.mean_loss;
    client.skipped_steps += s.skipped_steps;
  }

  client.train_accuracy = local_accuracy(client.image, client.task, text_embs);

  auto send = [&](PayloadKind kind, Bytes bytes) {
    channel.upload({client.id, broadcast.round, {kind, std::move(bytes)}});
  };
  send(PayloadKind::kLoraDelta, serialize_lora(client.image.lora()));
  send(PayloadKind::kSampleCount, serialize_scalar(static_cast<double>(client.size())));
  send(PayloadKind::kTrainAccuracy, serialize_scalar(client.train_accuracy));
  if (cfg.train.decoupled) {
    Rng upload_rng = make_rng({cfg.seed, key(Stream::kUpload), static_cast<std::uint64_t>(client.id),
                               static_cast<std::uint64_t>(broadcast.round)});
    const Matrix emb = encode_images(client.image, client.task.features);
    send(PayloadKind::kEmbeddings,
         serialize_embeddings(select_upload_embeddings(emb, client.labels, cfg.upload, upload_rng)));
  }
}

std::vector<int> choose_participants(const RunConfig& cfg, int num_clients, int round) {
  std::vector<int> ids(static_cast<std::size_t>(num_clients));
  std::iota(ids.begin(), ids.end(), 0);
  if (cfg.train.participation >= 1.0) return ids;
  const auto m = static_cast<std::size_t>(
      std::max(1.0, std::ceil(cfg.train.participation * num_clients - 1e-9)));
  Rng rng = make_rng({cfg.seed, key(Stream::kServer), static_cast<std::uint64_t>(round), 1});
  shuffle_in_place(ids, rng);
  ids.resize(std::min(ids.size(), m));
  std::sort(ids.begin(), ids.end());
  return ids;
}

}  // namespace

RoundResult run_round(ServerState& server, std::vector<ClientState>& clients, const RoundContext& ctx,
                      int round) {
  if (round < 1) throw std::invalid_argument("run_round: rounds start at 1");
  if (ctx.cfg == nullptr) throw std::invalid_argument("run_round: missing config");
  const RunConfig& cfg = *ctx.cfg;
  RoundResult result;
  result.participants = choose_participants(cfg, static_cast<int>(clients.size()), round);
  const Broadcast broadcast = server.make_broadcast(round);
  result.broadcast_text_version = broadcast.text_version;
  Channel channel(ctx.audit);

  const std::size_t n = result.participants.size();
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      ClientState& client = clients[static_cast<std::size_t>(result.participants[i])];
      try {
        client_update(client, broadcast, cfg, ctx.stage, channel);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const auto threads = std::min<std::size_t>(static_cast<std::size_t>(cfg.train.parallelism), n);
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < threads; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!errors[i]) continue;
    const int id = result.participants[i];
    try {
      std::rethrow_exception(errors[i]);
    } catch (const std::exception& e) {
      throw ClientError(id, e.what());
    } catch (...) {
      throw ClientError(id, "unknown failure");
    }
  }

  // server side: only what came through the channel
  std::map<int, LoraDelta> deltas;
  std::map<int, std::size_t> sizes;
  std::map<int, double> accuracies;
  EmbeddingBatch uploads;
  std::vector<Matrix> upload_parts;
  for (const ClientMessage& msg : channel.drain()) {
    switch (msg.payload.kind) {
      case PayloadKind::kLoraDelta:
        deltas[msg.client_id] = deserialize_lora(msg.payload.bytes);
        break;
      case PayloadKind::kSampleCount:
        sizes[msg.client_id] = static_cast<std::size_t>(deserialize_scalar(msg.payload.bytes));
        break;
      case PayloadKind::kTrainAccuracy:
        accuracies[msg.client_id] = deserialize_scalar(msg.payload.bytes);
        break;
      case PayloadKind::kEmbeddings: {
        EmbeddingBatch b = deserialize_embeddings(msg.payload.bytes);
        uploads.labels.insert(uploads.labels.end(), b.labels.begin(), b.labels.end());
        upload_parts.push_back(std::move(b.embeddings));
        break;
      }
    }
  }
  Eigen::Index total_cols = 0;
  for (const Matrix& m : upload_parts) total_cols += m.cols();
  uploads.embeddings.resize(server.text().output_dim(), total_cols);
  Eigen::Index col = 0;
  for (const Matrix& m : upload_parts) {
    uploads.embeddings.middleCols(col, m.cols()) = m;
    col += m.cols();
  }

  std::vector<LoraDelta> delta_list;
  std::vector<std::size_t> size_list;
  for (int id : result.participants) {
    if (!deltas.count(id) || !sizes.count(id) || !accuracies.count(id)) {
      throw ClientError(id, "incomplete upload");
    }
    delta_list.push_back(deltas[id]);
    size_list.push_back(sizes[id]);
    result.metrics.client_train_accuracy.push_back(accuracies[id]);
  }
  server.set_global_lora(aggregate_lora(delta_list, size_list));
  result.client_deltas = std::move(delta_list);
  result.upload_count = uploads.size();
  result.upload_labels = uploads.labels;

  if (cfg.train.decoupled && cfg.train.server_epochs > 0) {
    Rng rng = make_rng({cfg.seed, key(Stream::kServer), static_cast<std::uint64_t>(round), 0});
    const TextUpdateStats ts = server_text_update(server, uploads, cfg.model.tau, cfg.train.learning_rate,
                                                  cfg.train.batch_size, cfg.train.server_epochs, rng);
    if (ts.empty_upload) result.warnings.push_back("round " + std::to_string(round) + ": no embeddings uploaded");
  }

  RoundMetrics metrics;
  if (ctx.eval != nullptr) {
    metrics = evaluate_global(server.global_image(), server.text_embeddings(), cfg.model.tau, *ctx.eval);
  }
  metrics.round = round;
  metrics.stage = ctx.stage == StageController::Stage::kSft ? "sft" : "rl";
  metrics.client_train_accuracy = result.metrics.client_train_accuracy;
  double acc_sum = 0.0;
  double loss_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const ClientState& c = clients[static_cast<std::size_t>(result.participants[i])];
    acc_sum += metrics.client_train_accuracy[i];
    loss_sum += c.last_loss;
    metrics.skipped_steps += c.skipped_steps;
  }
  metrics.train_accuracy_mean = acc_sum / static_cast<double>(n);
  metrics.mean_train_loss = loss_sum / static_cast<double>(n);
  result.metrics = std::move(metrics);
  server.advance_round();
  return result;
}

ExperimentResult run_experiment(const RunConfig& cfg, const ExperimentHooks& hooks) {
  cfg.validate();
  const SyntheticData data = generate_synthetic(cfg.effective_data());
  const ClassSplit split = split_base_novel(cfg.data.num_classes, cfg.data.base_fraction);
  const Dataset train = restrict_to_classes(data.train, split.base);
  const std::vector<Shard> shards = partition(train, cfg.partition, cfg.seed);

  const DualEncoder model = init_pretrained_like(cfg.seed, cfg.model.dims(), cfg.model.tau, cfg.model.init_scale);
  std::vector<ClientState> clients;
  EvaluationContext eval;
  eval.test = &data.test;
  eval.base_classes = split.base;
  eval.novel_classes = split.novel;
  eval.num_domains = cfg.data.num_domains;
  for (std::size_t k = 0; k < shards.size(); ++k) {
    if (shards[k].empty()) throw ConfigError("partition produced an empty shard for client " + std::to_string(k));
    const Dataset local = train.subset(shards[k]);
    ClientState c;
    c.id = static_cast<int>(k);
    c.task.features = local.features;
    c.labels = local.labels;
    c.classes = local.present_classes();
    for (int label : local.labels) {
      c.task.targets.push_back(static_cast<int>(std::lower_bound(c.classes.begin(), c.classes.end(), label) -
                                                c.classes.begin()));
    }
    std::set<int> doms(local.domains.begin(), local.domains.end());
    c.domains.assign(doms.begin(), doms.end());
    c.image = model.image;
    eval.client_classes.push_back(c.classes);
    eval.client_domains.push_back(c.domains);
    clients.push_back(std::move(c));
  }

  ServerState server(model.image, model.text, data.bank, split.base);
  ExperimentResult result;
  result.num_clients = static_cast<int>(clients.size());
  result.base_classes = split.base;
  result.novel_classes = split.novel;
  result.zero_shot = evaluate_global(server.global_image(), server.text_embeddings(), cfg.model.tau, eval);
  result.zero_shot.stage = "zero_shot";

  std::optional<StageController> controller;
  if (cfg.train.schedule == Schedule::kRlOnly) {
    server.set_sft_checkpoint(server.global_lora());
    result.transition_round = 0;
  } else if (cfg.train.schedule == Schedule::kSftRl) {
    controller.emplace(cfg.stage.eps_acc, cfg.stage.required_rounds, cfg.stage.fixed_m);
    if (controller->stage() == StageController::Stage::kRl) {
      server.set_sft_checkpoint(server.global_lora());
      result.transition_round = 0;
    }
  }

  RoundContext ctx;
  ctx.cfg = &cfg;
  ctx.eval = &eval;
  ctx.audit = hooks.audit;
  for (int t = 1; t <= cfg.train.rounds; ++t) {
    ctx.stage = server.sft_checkpoint() ? StageController::Stage::kRl : StageController::Stage::kSft;
    RoundResult r = run_round(server, clients, ctx, t);
    if (ctx.stage == StageController::Stage::kSft && controller &&
        controller->should_transition(r.metrics.train_accuracy_mean)) {
      server.set_sft_checkpoint(server.global_lora());
      result.transition_round = t;
    }
    result.warnings.insert(result.warnings.end(), r.warnings.begin(), r.warnings.end());
    result.history.push_back(r.metrics);
    if (hooks.after_round) hooks.after_round(r, server, clients);
  }
  result.final_image_lora = server.global_lora();
  result.final_text_lora = server.text().lora();
  return result;
}

}  // namespace dualfed
