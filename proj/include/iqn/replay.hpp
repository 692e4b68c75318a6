#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "iqn/envs.hpp"

namespace iqn {

// Fixed-capacity FIFO store of transitions. Index 0 is the oldest element.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity);

  void push(Transition t);

  std::size_t size() const { return size_; }
  std::size_t capacity() const { return storage_.size(); }
  bool empty() const { return size_ == 0; }
  std::uint64_t pushes() const { return pushes_; }

  const Transition& at(std::size_t i) const;

  // `batch_size` uniform draws with replacement, as positions into the buffer.
  std::vector<std::size_t> sample_indices(std::size_t batch_size, Rng& rng) const;
  std::vector<Transition> sample_minibatch(std::size_t batch_size, Rng& rng) const;

  std::vector<Transition> contents() const;

 private:
  std::vector<Transition> storage_;
  std::size_t head_ = 0;  // slot of the oldest element
  std::size_t size_ = 0;
  std::uint64_t pushes_ = 0;
};

}  // namespace iqn
