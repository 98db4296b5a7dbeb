#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "voxrel/error.hpp"

namespace voxrel {

// Dense n-d array, row-major (last axis fastest). Copies are shallow: they
// share the element and gradient buffers. Gradients live in a parallel
// buffer allocated by enable_grad() or by the recording ops.
template <typename T>
struct Tensor {
    std::vector<int64_t> shape;
    std::shared_ptr<std::vector<T>> data_;
    std::shared_ptr<std::vector<T>> grad_;
    // Index of the op node that produced this tensor, -1 for leaves.
    int32_t tape_id = -1;

    Tensor() = default;

    static Tensor zeros(std::vector<int64_t> shape) {
        Tensor t;
        t.shape = std::move(shape);
        t.data_ = std::make_shared<std::vector<T>>(static_cast<size_t>(t.numel()), T(0));
        return t;
    }

    static Tensor full(std::vector<int64_t> shape, T value) {
        Tensor t = zeros(std::move(shape));
        std::fill(t.data_->begin(), t.data_->end(), value);
        return t;
    }

    static Tensor from_vector(std::vector<int64_t> shape, std::vector<T> values) {
        Tensor t;
        t.shape = std::move(shape);
        if (static_cast<int64_t>(values.size()) != t.numel())
            throw ShapeError("tensor init: " + std::to_string(values.size()) +
                             " values for shape with numel " + std::to_string(t.numel()));
        t.data_ = std::make_shared<std::vector<T>>(std::move(values));
        return t;
    }

    static Tensor scalar(T value) { return from_vector({1}, {value}); }

    int64_t numel() const {
        int64_t n = 1;
        for (int64_t s : shape) n *= s;
        return n;
    }

    int64_t dim(size_t i) const { return shape.at(i); }
    size_t  ndim() const { return shape.size(); }

    T* data() { return data_->data(); }
    const T* data() const { return data_->data(); }
    T& operator[](int64_t i) { return (*data_)[static_cast<size_t>(i)]; }
    T operator[](int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }
    T item() const {
        if (numel() != 1) throw ShapeError("item() on non-scalar tensor");
        return (*data_)[0];
    }

    bool tracks_grad() const { return grad_ != nullptr; }

    void enable_grad() {
        if (!grad_) grad_ = std::make_shared<std::vector<T>>(static_cast<size_t>(numel()), T(0));
    }

    T* grad() { return grad_->data(); }
    const T* grad() const { return grad_->data(); }
    std::vector<T>& grad_vec() { return *grad_; }
    const std::vector<T>& grad_vec() const { return *grad_; }

    void zero_grad() {
        if (grad_) std::fill(grad_->begin(), grad_->end(), T(0));
    }

    std::string shape_str() const {
        std::string s = "[";
        for (size_t i = 0; i < shape.size(); ++i)
            s += (i ? "," : "") + std::to_string(shape[i]);
        return s + "]";
    }
};

// Record of differentiable ops in execution order. backward() replays the
// records in reverse, once each. relu_mode is consulted by ReLU records at
// backward time, so it may be switched between forward and backward.
template <typename T>
class Tape {
  public:
    enum class ReluMode { Standard, Guided };

    ReluMode relu_mode = ReluMode::Standard;
    // When false, ops run forward-only and record nothing.
    bool recording = true;

    int32_t record(std::function<void(Tape&)> backward_fn) {
        nodes_.push_back(std::move(backward_fn));
        return static_cast<int32_t>(nodes_.size()) - 1;
    }

    // Grad buffers are zeroed at the start of backward, so each run yields
    // exact derivatives of the selected output, not an accumulation across runs.
    void touch(const Tensor<T>& t) {
        if (t.grad_) touched_.push_back(t.grad_);
    }

    void backward(Tensor<T>& output) {
        if (output.numel() != 1)
            throw ShapeError("backward: output has " + std::to_string(output.numel()) +
                             " elements, expected a scalar");
        backward_component(output, 0);
    }

    // Seeds d(output[flat_index]) = 1: derivative of one selected component.
    void backward_component(Tensor<T>& output, int64_t flat_index) {
        if (backward_done_)
            throw Error("backward already run on this tape; call reset() to run again");
        if (!output.tracks_grad())
            throw Error("backward: output does not track gradients");
        if (flat_index < 0 || flat_index >= output.numel())
            throw ValueError("backward: component index out of range");
        for (auto& g : touched_) std::fill(g->begin(), g->end(), T(0));
        output.grad()[flat_index] = T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)(*this);
        backward_done_ = true;
    }

    void reset() { backward_done_ = false; }

    size_t size() const { return nodes_.size(); }

  private:
    std::vector<std::function<void(Tape&)>> nodes_;
    std::vector<std::shared_ptr<std::vector<T>>> touched_;
    bool backward_done_ = false;
};

enum class Mode { Train, Eval };

}  // namespace voxrel
