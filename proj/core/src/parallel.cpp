#include "ralgen/parallel.hpp"

#include <algorithm>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <thread>
#include <vector>

namespace ralgen {

namespace {

int read_worker_count() {
  if (const char* env = std::getenv("RALGEN_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return static_cast<int>(std::clamp(hw, 1u, 4u));
}

thread_local bool inside_parallel = false;

// Minimal persistent pool. A job is a contiguous chunk of indices; the
// calling thread participates.
class Pool {
 public:
  explicit Pool(int workers) : stop_(false) {
    for (int i = 0; i < workers; ++i) {
      threads_.emplace_back([this] { worker_loop(); });
    }
  }

  ~Pool() {
    {
      std::lock_guard<std::mutex> lk(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

  void run(int64_t n, const std::function<void(int64_t)>& fn) {
    const int parts = static_cast<int>(threads_.size()) + 1;
    const int64_t chunk = (n + parts - 1) / parts;
    int pending = 0;
    for (int64_t s = chunk; s < n; s += chunk) ++pending;
    {
      std::lock_guard<std::mutex> lk(mu_);
      fn_ = &fn;
      next_ = chunk;
      total_ = n;
      chunk_ = chunk;
      pending_ = pending;
      generation_++;
    }
    cv_.notify_all();
    for (int64_t i = 0; i < std::min(chunk, n); ++i) fn(i);
    std::unique_lock<std::mutex> lk(mu_);
    done_cv_.wait(lk, [this] { return pending_ == 0; });
    fn_ = nullptr;
  }

 private:
  void worker_loop() {
    inside_parallel = true;
    uint64_t seen = 0;
    std::unique_lock<std::mutex> lk(mu_);
    for (;;) {
      cv_.wait(lk, [&] { return stop_ || (generation_ != seen && fn_ != nullptr); });
      if (stop_) return;
      seen = generation_;
      for (;;) {
        const int64_t start = next_;
        if (start >= total_) break;
        next_ += chunk_;
        const int64_t end = std::min(start + chunk_, total_);
        const auto* fn = fn_;
        lk.unlock();
        for (int64_t i = start; i < end; ++i) (*fn)(i);
        lk.lock();
        if (--pending_ == 0) done_cv_.notify_all();
      }
    }
  }

  std::mutex mu_;
  std::condition_variable cv_, done_cv_;
  std::vector<std::thread> threads_;
  const std::function<void(int64_t)>* fn_ = nullptr;
  int64_t next_ = 0, total_ = 0, chunk_ = 0;
  int pending_ = 0;
  uint64_t generation_ = 0;
  bool stop_;
};

}  // namespace

int worker_count() {
  static const int n = read_worker_count();
  return n;
}

void parallel_for(int64_t n, const std::function<void(int64_t)>& fn) {
  static Pool* pool = worker_count() > 1 ? new Pool(worker_count() - 1) : nullptr;
  if (n <= 0) return;
  // Nested calls run inline: the pool is not reentrant.
  if (pool == nullptr || n < 2 || inside_parallel) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  inside_parallel = true;
  pool->run(n, fn);
  inside_parallel = false;
}

}  // namespace ralgen
