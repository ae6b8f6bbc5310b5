#pragma once

#include <condition_variable>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace ipsfuse {

// The training loop churns multi-megabyte scratch buffers every step; keeping
// freed blocks in the allocator instead of returning pages to the kernel
// avoids re-faulting them on every allocation.
inline void tune_allocator_once() {
#if defined(__GLIBC__)
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 512 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 512 * 1024 * 1024);
    return true;
  }();
  (void)done;
#endif
}

// Persistent worker pool for data-parallel kernels. Work is split into fixed
// contiguous ranges, so every output element is computed by exactly one task
// in a fixed order: results are bit-identical for any worker count.
class ThreadPool {
 public:
  static ThreadPool& instance() {
    static ThreadPool pool;
    return pool;
  }

  static int env_thread_cap() {
    const char* v = std::getenv("IPSFUSE_THREADS");
    if (!v) return 0;
    int n = std::atoi(v);
    return n > 0 ? n : 0;
  }

  int size() const { return static_cast<int>(workers_.size()) + 1; }

  void set_threads(int n) {
    if (n < 1) n = 1;
    if (n == size()) return;
    shutdown();
    spawn(n - 1);
  }

  // fn(begin, end) over disjoint subranges of [0, n)
  void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn) {
    if (n == 0) return;
    int nthreads = size();
    if (nthreads == 1 || n == 1 || in_worker_) {
      fn(0, n);  // nested calls run inline to avoid deadlock
      return;
    }
    std::size_t chunk = (n + static_cast<std::size_t>(nthreads) - 1) / static_cast<std::size_t>(nthreads);
    std::size_t nchunks = (n + chunk - 1) / chunk;
    std::uint64_t job_epoch;
    {
      std::unique_lock<std::mutex> lk(mu_);
      job_fn_ = &fn;
      job_n_ = n;
      job_chunk_ = chunk;
      job_next_ = 0;
      pending_ = nchunks;
      job_epoch = ++epoch_;
    }
    cv_work_.notify_all();
    run_chunks(fn, job_epoch);
    std::unique_lock<std::mutex> lk(mu_);
    cv_done_.wait(lk, [&] { return pending_ == 0; });
    job_fn_ = nullptr;
  }

  ~ThreadPool() { shutdown(); }

 private:
  ThreadPool() {
    tune_allocator_once();
    int n = env_thread_cap();
    if (n == 0) n = static_cast<int>(std::thread::hardware_concurrency());
    if (n < 1) n = 1;
    spawn(n - 1);
  }

  void spawn(int nworkers) {
    stop_ = false;
    for (int i = 0; i < nworkers; ++i) {
      workers_.emplace_back([this] { worker_loop(); });
    }
  }

  void shutdown() {
    {
      std::unique_lock<std::mutex> lk(mu_);
      stop_ = true;
      ++epoch_;
    }
    cv_work_.notify_all();
    for (auto& w : workers_) w.join();
    workers_.clear();
  }

  void worker_loop() {
    in_worker_ = true;
    std::uint64_t seen = 0;
    for (;;) {
      const std::function<void(std::size_t, std::size_t)>* fn = nullptr;
      {
        std::unique_lock<std::mutex> lk(mu_);
        cv_work_.wait(lk, [&] { return stop_ || (epoch_ != seen && job_fn_); });
        if (stop_) return;
        seen = epoch_;
        fn = job_fn_;
      }
      if (fn) run_chunks(*fn, seen);
    }
  }

  // Claims are guarded by the job epoch: once a newer job is posted, stale
  // callers must not touch it (their fn reference belongs to the old job).
  void run_chunks(const std::function<void(std::size_t, std::size_t)>& fn,
                  std::uint64_t job_epoch) {
    for (;;) {
      std::size_t begin;
      {
        std::unique_lock<std::mutex> lk(mu_);
        if (epoch_ != job_epoch || job_next_ >= job_n_) return;
        begin = job_next_;
        job_next_ += job_chunk_;
      }
      std::size_t end = std::min(begin + job_chunk_, job_n_);
      fn(begin, end);
      {
        std::unique_lock<std::mutex> lk(mu_);
        if (--pending_ == 0) cv_done_.notify_all();
      }
    }
  }

  std::vector<std::thread> workers_;
  std::mutex mu_;
  std::condition_variable cv_work_, cv_done_;
  const std::function<void(std::size_t, std::size_t)>* job_fn_ = nullptr;
  std::size_t job_n_ = 0, job_chunk_ = 0, job_next_ = 0, pending_ = 0;
  std::uint64_t epoch_ = 0;
  bool stop_ = false;
  static thread_local bool in_worker_;
};

inline thread_local bool ThreadPool::in_worker_ = false;

inline void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn) {
  ThreadPool::instance().parallel_for(n, fn);
}

}  // namespace ipsfuse
