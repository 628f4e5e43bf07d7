#include "mat/common.hpp"

#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <thread>

namespace mat {
namespace {

int resolve_worker_count() {
  if (const char* env = std::getenv("MAT_THREADS")) {
    int v = std::atoi(env);
    if (v >= 1) return v;
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

// Persistent pool; workers sleep between jobs. The caller always executes
// chunk 0 itself, so a pool of size 1 never touches a mutex.
class Pool {
 public:
  Pool() : size_(resolve_worker_count()) {
    for (int i = 1; i < size_; ++i)
      threads_.emplace_back([this, i] { worker(i); });
  }

  ~Pool() {
    {
      std::lock_guard<std::mutex> lk(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

  int size() const { return size_; }

  void run(size_t n, const std::function<void(size_t, size_t)>& chunk) {
    if (n == 0) return;
    size_t parts = static_cast<size_t>(size_);
    if (parts > n) parts = n;
    if (parts == 1) {
      chunk(0, n);
      return;
    }
    {
      std::lock_guard<std::mutex> lk(mu_);
      job_ = &chunk;
      job_n_ = n;
      job_parts_ = parts;
      pending_ = parts - 1;  // chunk 0 runs on the caller
      ++generation_;
    }
    cv_.notify_all();
    run_part(0);
    std::unique_lock<std::mutex> lk(mu_);
    done_cv_.wait(lk, [this] { return pending_ == 0; });
    job_ = nullptr;
  }

 private:
  void run_part(size_t part) {
    size_t base = job_n_ / job_parts_, rem = job_n_ % job_parts_;
    size_t begin = part * base + std::min(part, rem);
    size_t end = begin + base + (part < rem ? 1 : 0);
    (*job_)(begin, end);
  }

  void worker(int index) {
    uint64_t seen = 0;
    for (;;) {
      std::unique_lock<std::mutex> lk(mu_);
      cv_.wait(lk, [&] { return stop_ || generation_ != seen; });
      if (stop_) return;
      seen = generation_;
      size_t part = static_cast<size_t>(index);
      bool mine = part < job_parts_;
      lk.unlock();
      if (mine) {
        run_part(part);
        lk.lock();
        if (--pending_ == 0) done_cv_.notify_one();
      }
    }
  }

  int size_;
  std::vector<std::thread> threads_;
  std::mutex mu_;
  std::condition_variable cv_, done_cv_;
  const std::function<void(size_t, size_t)>* job_ = nullptr;
  size_t job_n_ = 0, job_parts_ = 0, pending_ = 0;
  uint64_t generation_ = 0;
  bool stop_ = false;
};

Pool& pool() {
  static Pool p;
  return p;
}

}  // namespace

int worker_count() { return pool().size(); }

void parallel_for(size_t n, const std::function<void(size_t, size_t)>& chunk) {
  pool().run(n, chunk);
}

}  // namespace mat
