#include "dseal/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <thread>
#include <vector>

extern "C" void openblas_set_num_threads(int);

namespace dseal {
namespace {

std::atomic<int> g_threads{0};
std::atomic<bool> g_strict{false};
thread_local bool tl_in_worker = false;

int detect_default() {
  if (const char* env = std::getenv("DSEAL_THREADS")) {
    int n = std::atoi(env);
    if (n >= 1) return n;
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(std::min<unsigned>(hw, 8));
}

// Persistent pool: N-1 workers plus the calling thread. Work is a static
// partition of an index range, so execution is deterministic by layout.
class Pool {
 public:
  explicit Pool(int workers) : workers_(workers), stop_(false) {
    for (int t = 1; t < workers_; ++t) {
      threads_.emplace_back([this, t] { worker_loop(t); });
    }
  }

  ~Pool() {
    {
      std::unique_lock<std::mutex> lk(mu_);
      stop_ = true;
      epoch_++;
    }
    cv_.notify_all();
    for (auto& th : threads_) th.join();
  }

  int workers() const { return workers_; }

  void run(int64_t n, const std::function<void(int64_t)>& fn) {
    int parts = static_cast<int>(std::min<int64_t>(workers_, n));
    int64_t chunk = (n + parts - 1) / parts;
    {
      std::unique_lock<std::mutex> lk(mu_);
      job_fn_ = &fn;
      job_n_ = n;
      job_chunk_ = chunk;
      pending_ = workers_ - 1;
      epoch_++;
    }
    cv_.notify_all();
    run_range(0, std::min<int64_t>(chunk, n), fn);
    std::unique_lock<std::mutex> lk(mu_);
    done_cv_.wait(lk, [this] { return pending_ == 0; });
    job_fn_ = nullptr;
  }

 private:
  static void run_range(int64_t lo, int64_t hi, const std::function<void(int64_t)>& fn) {
    for (int64_t i = lo; i < hi; ++i) fn(i);
  }

  void worker_loop(int idx) {
    tl_in_worker = true;
    uint64_t seen = 0;
    while (true) {
      const std::function<void(int64_t)>* fn = nullptr;
      int64_t lo = 0, hi = 0;
      {
        std::unique_lock<std::mutex> lk(mu_);
        cv_.wait(lk, [&] { return epoch_ != seen; });
        seen = epoch_;
        if (stop_) return;
        if (job_fn_) {
          lo = idx * job_chunk_;
          hi = std::min<int64_t>(job_n_, lo + job_chunk_);
          fn = job_fn_;
        }
      }
      if (fn && lo < hi) run_range(lo, hi, *fn);
      {
        std::unique_lock<std::mutex> lk(mu_);
        if (pending_ > 0 && --pending_ == 0) done_cv_.notify_one();
      }
    }
  }

  int workers_;
  std::mutex mu_;
  std::condition_variable cv_, done_cv_;
  std::vector<std::thread> threads_;
  const std::function<void(int64_t)>* job_fn_ = nullptr;
  int64_t job_n_ = 0, job_chunk_ = 0;
  int pending_ = 0;
  uint64_t epoch_ = 0;
  bool stop_;
};

Pool* g_pool = nullptr;
std::mutex g_pool_mu;

}  // namespace

void set_num_threads(int n) {
  std::unique_lock<std::mutex> lk(g_pool_mu);
  n = std::max(1, n);
  g_threads.store(n);
  openblas_set_num_threads(1);
  delete g_pool;
  g_pool = nullptr;
}

int num_threads() {
  int n = g_threads.load();
  if (n == 0) {
    set_num_threads(detect_default());
    n = g_threads.load();
  }
  return n;
}

void enter_strict_mode() {
  g_strict.store(true);
  set_num_threads(1);
}

bool strict_mode() { return g_strict.load(); }

void parallel_for(int64_t n, const std::function<void(int64_t)>& fn) {
  if (n <= 0) return;
  int workers = num_threads();
  if (workers <= 1 || n == 1 || tl_in_worker) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::unique_lock<std::mutex> lk(g_pool_mu);
  if (!g_pool) g_pool = new Pool(workers);
  Pool* pool = g_pool;
  // Hold the lock for the whole job: one parallel region at a time by design.
  pool->run(n, fn);
}

}  // namespace dseal
