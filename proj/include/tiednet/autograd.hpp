#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "tiednet/tensor.hpp"

namespace tiednet {

/// Named trainable tensor with a gradient accumulator.
///
/// A Parameter is the unit of weight tying: a tied layer holds one
/// ParamPtr and uses it in two roles (W and its transpose view). Every use
/// on a tape deposits into the same `grad` buffer, so the accumulated
/// gradient is the sum of all contributions.
struct Parameter : std::enable_shared_from_this<Parameter> {
  Parameter(std::string name, Tensor value, bool trainable = true);

  std::string name;
  Tensor value;
  Tensor grad;  // same dims and dtype as value
  bool trainable = true;

  // Value handle tracked on the active tape (plain value when no tape is
  // recording or the parameter is frozen).
  Tensor var();
  void zero_grad();
};

using ParamPtr = std::shared_ptr<Parameter>;

ParamPtr make_param(std::string name, Tensor value, bool trainable = true);

class GradSink;

/// Define-by-run reverse-mode tape. Constructing a Tape makes it the active
/// tape of the calling thread until it is destroyed; operations on tracked
/// tensors record themselves onto it.
class Tape {
 public:
  using BackwardFn = std::function<void(const Tensor& grad_out, GradSink& sink)>;

  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();
  // Whether operations currently record (false inside backward and under
  // NoGradGuard).
  static bool recording();
  // True while any tape on this thread is replaying backward rules.
  static bool in_backward();

  std::uint64_t serial() const { return serial_; }
  std::size_t num_ops() const { return entries_.size(); }
  std::size_t num_nodes() const { return nodes_.size(); }

  Tensor leaf(const ParamPtr& param);

  // Tags `output` with a new node when any input is tracked on this tape and
  // stores `fn` as its backward rule. Returns `output` unchanged otherwise.
  Tensor record(Tensor output, std::initializer_list<const Tensor*> inputs,
                BackwardFn fn);

  // Accumulates d(loss)/d(param) into every reachable Parameter's grad.
  void backward(const Tensor& loss);

 private:
  friend class GradSink;

  struct Node {
    Shape dims;
    DType dtype;
    ParamPtr param;  // set for leaves
  };
  struct Entry {
    std::vector<std::int32_t> inputs;  // -1 for untracked inputs
    std::int32_t output;
    BackwardFn backward;
  };

  std::int32_t input_id(const Tensor& t) const;

  std::uint64_t serial_;
  Tape* previous_;
  std::vector<Node> nodes_;
  std::vector<Entry> entries_;
  std::unordered_map<const Parameter*, std::int32_t> leaf_ids_;
};

class GradSink {
 public:
  bool needs(std::size_t input) const;
  // Adds g to the gradient of the given input (no-op if untracked).
  void add(std::size_t input, const Tensor& g);

 private:
  friend class Tape;
  GradSink(std::vector<Tensor>& grads, const std::vector<std::int32_t>& ids)
      : grads_(grads), ids_(ids) {}
  std::vector<Tensor>& grads_;
  const std::vector<std::int32_t>& ids_;
};

// Runs backward on the active tape.
void backward(const Tensor& loss);

// dst += src elementwise (dims and dtype must match).
void accumulate_into(Tensor& dst, const Tensor& src);

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

}  // namespace tiednet
