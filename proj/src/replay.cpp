#include "iqn/replay.hpp"

#include <random>

#include "iqn/errors.hpp"

namespace iqn {

ReplayBuffer::ReplayBuffer(std::size_t capacity) {
  if (capacity == 0) throw InputError("ReplayBuffer: capacity must be >= 1");
  storage_.resize(capacity);
}

void ReplayBuffer::push(Transition t) {
  const std::size_t cap = storage_.size();
  if (size_ < cap) {
    storage_[(head_ + size_) % cap] = std::move(t);
    ++size_;
  } else {
    storage_[head_] = std::move(t);
    head_ = (head_ + 1) % cap;
  }
  ++pushes_;
}

const Transition& ReplayBuffer::at(std::size_t i) const {
  if (i >= size_) throw InputError("ReplayBuffer::at: index out of range");
  return storage_[(head_ + i) % storage_.size()];
}

std::vector<std::size_t> ReplayBuffer::sample_indices(std::size_t batch_size, Rng& rng) const {
  if (size_ == 0) throw UsageError("ReplayBuffer: cannot sample from an empty buffer");
  std::uniform_int_distribution<std::size_t> pick(0, size_ - 1);
  std::vector<std::size_t> idx(batch_size);
  for (auto& i : idx) i = pick(rng);
  return idx;
}

std::vector<Transition> ReplayBuffer::sample_minibatch(std::size_t batch_size, Rng& rng) const {
  std::vector<Transition> batch;
  batch.reserve(batch_size);
  for (std::size_t i : sample_indices(batch_size, rng)) batch.push_back(at(i));
  return batch;
}

std::vector<Transition> ReplayBuffer::contents() const {
  std::vector<Transition> out;
  out.reserve(size_);
  for (std::size_t i = 0; i < size_; ++i) out.push_back(at(i));
  return out;
}

}  // namespace iqn
