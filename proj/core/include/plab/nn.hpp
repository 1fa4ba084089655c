#pragma once

#include <cstdint>
#include <memory>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "plab/tokens.hpp"

namespace plab {

enum class Family { transformer, gated_mlp, rnn, linear };

std::string_view to_string(Family f);
Family family_from_string(std::string_view s);

struct ArchDescriptor {
  Family family = Family::transformer;
  int n_layers = 4;
  int d_model = 128;
  int n_heads = 4;
  int d_mlp = 512;
  int vocab_size = kVocabSize;
  int max_seq_len = 16;

  // Throws std::invalid_argument naming the offending field.
  void validate() const;

  // "family=transformer n_layers=4 ..." -- the text form stored in checkpoints.
  std::string to_text() const;
  static ArchDescriptor from_text(std::string_view text);

  bool operator==(const ArchDescriptor&) const = default;
};

struct ParamSlot {
  std::string name;
  std::size_t offset = 0;
  int rows = 0;
  int cols = 0;
  std::size_t size() const { return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols); }
};

// Named views into the flat parameter array. The order of slots is the
// stable parameter ordering for an architecture.
class ParamLayout {
 public:
  explicit ParamLayout(const ArchDescriptor& arch);

  const std::vector<ParamSlot>& slots() const { return slots_; }
  const ParamSlot& at(std::string_view name) const;
  bool contains(std::string_view name) const;
  std::size_t total() const { return total_; }

 private:
  void add(std::string name, int rows, int cols);

  std::vector<ParamSlot> slots_;
  std::size_t total_ = 0;
};

struct ModelState {
  ArchDescriptor arch;
  std::vector<float> params;

  std::size_t param_count() const { return params.size(); }
  bool all_finite() const;
};

// Weights ~ N(0, 0.02), biases 0, layer-norm gains 1. The rnn family uses
// N(0, 1/sqrt(d_model)) for its recurrent matrices so the cell starts away
// from saturation.
ModelState init(const ArchDescriptor& arch, std::uint64_t seed);

struct AblationMask {
  std::set<std::pair<int, int>> zeroed_heads;  // (layer, head)

  bool empty() const { return zeroed_heads.empty(); }
  void validate(const ArchDescriptor& arch) const;
};

struct ForwardResult {
  int n = 0;
  int seq_len = 0;
  int vocab = 0;
  std::vector<float> logits;  // [n][seq_len][vocab]
  double loss = 0.0;          // mean over examples of summed target CE, nats
  std::vector<double> per_example_loss;

  float logit(int seq, int pos, int tok) const {
    return logits[(static_cast<std::size_t>(seq) * seq_len + pos) * vocab + tok];
  }
};

// Reusable forward/backward engine for one architecture. Holds activation
// buffers so repeated calls do not reallocate. Not thread-safe; use one
// engine per thread.
template <typename Scalar>
class Engine {
 public:
  explicit Engine(const ArchDescriptor& arch);
  ~Engine();
  Engine(Engine&&) noexcept;
  Engine& operator=(Engine&&) noexcept;

  struct Request {
    std::span<Scalar> grad;                        // gradient of mean loss, if non-empty
    std::vector<double>* per_example = nullptr;    // summed target CE per sequence
    std::vector<float>* logits = nullptr;          // full logits
    const AblationMask* mask = nullptr;
  };

  // Returns the mean per-example loss. Throws on malformed batches.
  double run(std::span<const Scalar> params, const TokenBatch& batch, const Request& req);

  const ArchDescriptor& arch() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

extern template class Engine<float>;
extern template class Engine<double>;

// Checks token ids and lengths against the architecture.
void validate_batch(const ArchDescriptor& arch, const TokenBatch& batch);

ForwardResult forward(const ModelState& model, const TokenBatch& batch,
                      const AblationMask* mask = nullptr);

// Gradient of the mean loss, same ordering as params.
std::vector<float> backward(const ModelState& model, const TokenBatch& batch);

// Double-precision loss and gradient at an arbitrary parameter vector; used by
// finite-difference oracles and Hessian probes.
double loss_f64(const ArchDescriptor& arch, std::span<const double> params, const TokenBatch& batch);
double loss_and_gradient_f64(const ArchDescriptor& arch, std::span<const double> params,
                             const TokenBatch& batch, std::span<double> grad);

// Hessian-vector product by central differences of double-precision
// gradients: (g(theta + eps v) - g(theta - eps v)) / (2 eps), eps = eps0/|v|.
inline constexpr double kHvpEps0 = 1e-3;

class HessianOperator {
 public:
  HessianOperator(const ModelState& model, TokenBatch batch, double eps0 = kHvpEps0);
  ~HessianOperator();

  std::size_t dim() const { return theta_.size(); }
  std::vector<double> apply(std::span<const double> v);
  std::size_t calls() const { return calls_; }

 private:
  ArchDescriptor arch_;
  TokenBatch batch_;
  double eps0_;
  std::vector<double> theta_;
  std::vector<double> work_theta_, g_plus_, g_minus_;
  std::unique_ptr<Engine<double>> engine_;
  std::size_t calls_ = 0;
};

std::vector<double> hvp(const ModelState& model, const TokenBatch& batch, std::span<const double> v,
                        double eps0 = kHvpEps0);

}  // namespace plab
