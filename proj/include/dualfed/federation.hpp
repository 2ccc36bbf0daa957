// Copyright 2026 The dualfed Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dualfed/adam.hpp"
#include "dualfed/config.hpp"
#include "dualfed/data.hpp"
#include "dualfed/encoders.hpp"
#include "dualfed/evaluation.hpp"
#include "dualfed/local_training.hpp"
#include "dualfed/serialization.hpp"

namespace dualfed {

// The only things a client may send upward. There is deliberately no kind for
// raw features.
enum class PayloadKind { kLoraDelta, kEmbeddings, kTrainAccuracy, kSampleCount };
std::string to_string(PayloadKind k);

struct Payload {
  PayloadKind kind;
  Bytes bytes;
};

struct ClientMessage {
  int client_id = 0;
  int round = 0;
  Payload payload;
};

/// In-process client -> server link. Every upload passes the audit hook (if
/// set) before it is queued. Safe to call from concurrent clients.
class Channel {
 public:
  using Audit = std::function<void(const ClientMessage&)>;

  explicit Channel(Audit audit = {}) : audit_(std::move(audit)) {}

  void upload(ClientMessage msg);
  // Queued messages ordered by client id, then by send order.
  std::vector<ClientMessage> drain();
  std::size_t bytes_received() const { return bytes_; }

 private:
  Audit audit_;
  std::mutex mu_;
  std::vector<std::pair<std::uint64_t, ClientMessage>> queue_;
  std::uint64_t sequence_ = 0;
  std::size_t bytes_ = 0;
};

/// Server -> client state for one round, already serialized.
struct Broadcast {
  int round = 0;
  Bytes global_lora;
  Bytes text_embeddings;  // EmbeddingBatch over base classes, labels are class ids
  std::uint64_t text_version = 0;
  std::optional<Bytes> sft_checkpoint;  // present once RL has started
};

/// A client-side failure, tagged with the client that raised it.
class ClientError : public std::runtime_error {
 public:
  ClientError(int client_id, const std::string& what)
      : std::runtime_error("client " + std::to_string(client_id) + ": " + what), client_id_(client_id) {}
  int client_id() const { return client_id_; }

 private:
  int client_id_;
};

struct ClientState {
  int id = 0;
  LocalTask task;           // targets index `classes`
  std::vector<int> labels;  // class ids
  std::vector<int> classes;  // sorted local classes, the softmax candidates
  std::vector<int> domains;
  EncoderStack image;
  double train_accuracy = 0.0;
  // local bookkeeping of the last round, never sent to the server
  double last_loss = 0.0;
  int skipped_steps = 0;

  std::size_t size() const { return labels.size(); }
};

class ServerState {
 public:
  ServerState(EncoderStack image_template, EncoderStack text, const ClassTextBank& bank,
              std::vector<int> base_classes);

  const LoraDelta& global_lora() const { return global_lora_; }
  void set_global_lora(LoraDelta delta);
  const std::optional<LoraDelta>& sft_checkpoint() const { return sft_checkpoint_; }
  // Throws std::logic_error when already set.
  void set_sft_checkpoint(LoraDelta delta);

  const EncoderStack& text() const { return text_; }
  EncoderStack& mutable_text() { return text_; }
  AdamState& text_adam() { return text_adam_; }
  const ClassTextBank& bank() const { return *bank_; }
  const std::vector<int>& base_classes() const { return base_classes_; }

  // Image encoder carrying the global LoRA.
  EncoderStack global_image() const;
  // embed_dim x C_all, refreshed by refresh_text_embeddings().
  const Matrix& text_embeddings() const { return text_embeddings_; }
  Matrix base_text_embeddings() const;
  std::uint64_t text_version() const { return text_version_; }
  void refresh_text_embeddings();

  int round() const { return round_; }
  void advance_round() { ++round_; }

  Broadcast make_broadcast(int round) const;

 private:
  EncoderStack image_template_;
  LoraDelta global_lora_;
  std::optional<LoraDelta> sft_checkpoint_;
  EncoderStack text_;
  AdamState text_adam_;
  const ClassTextBank* bank_;
  std::vector<int> base_classes_;
  Matrix text_embeddings_;
  std::uint64_t text_version_ = 0;
  int round_ = 0;
};

// Sum_k (N_k / N) * delta_k, matrix by matrix.
LoraDelta aggregate_lora(const std::vector<LoraDelta>& deltas, const std::vector<std::size_t>& sizes);

// Applies ratio / per-class cap, then group means, then additive noise.
EmbeddingBatch select_upload_embeddings(const Matrix& embeddings, const std::vector<int>& labels,
                                        const UploadPolicy& policy, Rng& rng);

// Mean CE of uploaded embeddings against text embeddings of `raw_text`
// (d_t x C) pushed through the text stack. Targets index columns of raw_text.
Tape::Var text_objective(Tape& tape, const EncoderStack& text, const std::vector<Tape::Var>& lora_leaves,
                         const Matrix& raw_text, const Matrix& image_embeddings,
                         const std::vector<int>& targets, double tau);

struct TextUpdateStats {
  double mean_loss = 0.0;
  int steps = 0;
  int skipped_steps = 0;
  bool empty_upload = false;
};

// Minibatch CE passes over the uploads, updating only the text LoRA, then
// refreshes the cached class embeddings. Labels must be base classes.
TextUpdateStats server_text_update(ServerState& server, const EmbeddingBatch& uploads, double tau,
                                   double learning_rate, int batch_size, int epochs, Rng& rng);

struct RoundContext {
  const RunConfig* cfg = nullptr;
  StageController::Stage stage = StageController::Stage::kSft;
  const EvaluationContext* eval = nullptr;
  Channel::Audit audit;
};

struct RoundResult {
  RoundMetrics metrics;
  std::vector<LoraDelta> client_deltas;  // indexed like the participating clients
  std::vector<int> participants;
  std::size_t upload_count = 0;
  std::vector<int> upload_labels;
  std::uint64_t broadcast_text_version = 0;
  std::vector<std::string> warnings;
};

// One round of broadcast, local updates, aggregation and (when decoupled) the
// server text update. A failing client aborts the round with its id.
RoundResult run_round(ServerState& server, std::vector<ClientState>& clients, const RoundContext& ctx,
                      int round);

struct ExperimentResult {
  RoundMetrics zero_shot;
  std::vector<RoundMetrics> history;
  std::optional<int> transition_round;
  LoraDelta final_image_lora;
  LoraDelta final_text_lora;
  int num_clients = 0;
  std::vector<int> base_classes;
  std::vector<int> novel_classes;
  std::vector<std::string> warnings;
};

struct ExperimentHooks {
  Channel::Audit audit;
  std::function<void(const RoundResult&, const ServerState&, const std::vector<ClientState>&)> after_round;
};

ExperimentResult run_experiment(const RunConfig& cfg, const ExperimentHooks& hooks = {});

}  // namespace dualfed
