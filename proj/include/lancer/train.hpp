#pragma once

// Data-parallel gradient accumulation with a reduction order that does not
// depend on the thread count.

#include <atomic>
#include <exception>
#include <thread>
#include <vector>

#include "lancer/ops.hpp"

namespace lancer {

/// Runs `loss_fn(aliased_model, example)` for every example in `batch`, each
/// against its own aliased parameter set, then sums the per-example gradients
/// into `model`'s parameters in batch order. Each example loss is scaled by
/// 1/|batch|. Returns the mean loss.
///
/// Model needs `aliased()` and `parameters()` listing tensors in a fixed order.
template <class T, class Model, class LossFn>
double accumulate_batch(const Model& model, const std::vector<std::size_t>& batch, LossFn&& loss_fn,
                        std::size_t threads) {
  const std::size_t n = batch.size();
  if (n == 0) return 0.0;
  std::vector<std::vector<Tensor<T>>> grads(n);
  std::vector<double> losses(n, 0.0);
  std::vector<std::exception_ptr> errors(n);
  const T inv = T(1) / static_cast<T>(n);

  auto work = [&](std::size_t i) {
    try {
      Model local = model.aliased();
      Tensor<T> loss = loss_fn(local, batch[i]);
      losses[i] = static_cast<double>(loss.item());
      backward(scale(loss, inv));
      grads[i] = local.parameters();
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };

  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) work(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) work(i);
      });
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  auto master = model.parameters();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < master.size(); ++p) {
      const auto& g = grads[i][p];
      if (!master[p].requires_grad() || !g.has_grad()) continue;
      auto dst = master[p].mutable_grad();
      auto src = g.grad();
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
    }
  double total = 0.0;
  for (double l : losses) total += l;
  return total / static_cast<double>(n);
}

/// Consecutive chunks of `order` of size `batch`, the last possibly shorter.
inline std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& order, std::size_t batch) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += batch)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + batch)));
  return out;
}

}  // namespace lancer
