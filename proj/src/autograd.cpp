#include "tiednet/autograd.hpp"

#include <atomic>

namespace tiednet {

namespace {

thread_local Tape* t_active = nullptr;
thread_local bool t_grad_enabled = true;
thread_local bool t_in_backward = false;
std::atomic<std::uint64_t> g_next_serial{1};

}  // namespace

Parameter::Parameter(std::string n, Tensor v, bool train)
    : name(std::move(n)),
      value(std::move(v)),
      grad(Tensor::zeros(value.dims(), value.dtype())),
      trainable(train) {}

Tensor Parameter::var() {
  Tape* tape = Tape::active();
  if (tape == nullptr || !trainable || !Tape::recording()) return value;
  return tape->leaf(shared_from_this());
}

void Parameter::zero_grad() { grad.fill(0.0); }

ParamPtr make_param(std::string name, Tensor value, bool trainable) {
  return std::make_shared<Parameter>(std::move(name), std::move(value),
                                     trainable);
}

Tape::Tape() : serial_(g_next_serial++), previous_(t_active) {
  t_active = this;
}

Tape::~Tape() { t_active = previous_; }

Tape* Tape::active() { return t_active; }

bool Tape::recording() { return t_active != nullptr && t_grad_enabled; }

bool Tape::in_backward() { return t_in_backward; }

Tensor Tape::leaf(const ParamPtr& param) {
  Tensor t = param->value;
  auto it = leaf_ids_.find(param.get());
  std::int32_t id;
  if (it != leaf_ids_.end()) {
    id = it->second;
  } else {
    id = static_cast<std::int32_t>(nodes_.size());
    nodes_.push_back({t.dims(), t.dtype(), param});
    leaf_ids_.emplace(param.get(), id);
  }
  t.node_ = id;
  t.tape_serial_ = serial_;
  return t;
}

std::int32_t Tape::input_id(const Tensor& t) const {
  return (t.node_ >= 0 && t.tape_serial_ == serial_) ? t.node_ : -1;
}

Tensor Tape::record(Tensor output, std::initializer_list<const Tensor*> inputs,
                    BackwardFn fn) {
  if (!recording() || t_active != this) return output;
  std::vector<std::int32_t> ids;
  ids.reserve(inputs.size());
  bool any = false;
  for (const Tensor* in : inputs) {
    const auto id = input_id(*in);
    any = any || id >= 0;
    ids.push_back(id);
  }
  if (!any) return output;
  const auto out_id = static_cast<std::int32_t>(nodes_.size());
  nodes_.push_back({output.dims(), output.dtype(), nullptr});
  entries_.push_back({std::move(ids), out_id, std::move(fn)});
  output.node_ = out_id;
  output.tape_serial_ = serial_;
  return output;
}

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward needs a scalar loss, got shape " +
                        shape_str(loss.dims()));
  }
  if (input_id(loss) < 0) {
    throw ContractError("loss was not produced on this tape");
  }
  struct Restore {
    bool grad_enabled, in_backward;
    ~Restore() {
      t_grad_enabled = grad_enabled;
      t_in_backward = in_backward;
    }
  } restore{t_grad_enabled, t_in_backward};
  t_grad_enabled = false;
  t_in_backward = true;

  std::vector<Tensor> grads(nodes_.size());
  grads[loss.node_] = Tensor::full(loss.dims(), 1.0, loss.dtype());
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    Tensor& g = grads[it->output];
    if (!g.defined()) continue;
    GradSink sink(grads, it->inputs);
    it->backward(g, sink);
    g = Tensor();  // intermediate grads are released once consumed
  }
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    if (nodes_[id].param && grads[id].defined()) {
      accumulate_into(nodes_[id].param->grad, grads[id]);
    }
  }
}

bool GradSink::needs(std::size_t input) const {
  return input < ids_.size() && ids_[input] >= 0;
}

void GradSink::add(std::size_t input, const Tensor& g) {
  if (!needs(input)) return;
  Tensor& slot = grads_[ids_[input]];
  if (!slot.defined()) {
    slot = g.clone();
  } else {
    accumulate_into(slot, g);
  }
}

void backward(const Tensor& loss) {
  Tape* tape = Tape::active();
  if (tape == nullptr) throw ContractError("backward without an active tape");
  tape->backward(loss);
}

void accumulate_into(Tensor& dst, const Tensor& src) {
  if (dst.dims() != src.dims()) {
    throw ShapeError("gradient shape " + shape_str(src.dims()) +
                     " does not match " + shape_str(dst.dims()));
  }
  if (dst.dtype() != src.dtype()) {
    throw ContractError("gradient dtype mismatch");
  }
  if (!dst.is_contiguous()) {
    throw ContractError("accumulate_into needs a contiguous destination");
  }
  dispatch(dst.dtype(), [&]<typename T>() {
    const Tensor s = src.contiguous();
    const T* from = s.data<T>();
    T* to = dst.data<T>();
    const auto n = dst.numel();
    for (std::int64_t i = 0; i < n; ++i) to[i] += from[i];
  });
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) {
  t_grad_enabled = false;
}

NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

}  // namespace tiednet
