// SPDX-License-Identifier: Apache-2.0
#include "arbor/tasks.hpp"

#include <cmath>
#include <stdexcept>

#include "arbor/rng.hpp"

namespace arbor {

namespace {

constexpr int kTrainSize = 2048;
constexpr int kValSize = 512;
constexpr double kTau = 6.283185307179586476925286766559;

// Class-balanced label sequence: each class count within one of n/classes.
std::vector<int> balanced_labels(int n, int classes, Rng& rng) {
  std::vector<int> labels;
  labels.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) labels.push_back(i % classes);
  rng.shuffle(labels);
  return labels;
}

// Class-dependent 2D sinusoid orientation plus noise. Integer frequencies
// with a random phase give near-zero channel means, so a mean-pooled
// linear head carries almost no class signal.
Dataset im_patterns_split(int n, Rng& rng) {
  const int c = 3, h = 16, w = 16, classes = 4;
  static const int fy[] = {1, 0, 2, 1};
  static const int fx[] = {0, 1, 1, 2};
  Dataset ds;
  ds.labels = balanced_labels(n, classes, rng);
  ds.inputs = Tensor({n, c, h, w});
  double* p = ds.inputs.ptr();
  for (int i = 0; i < n; ++i) {
    const int cls = ds.labels[static_cast<std::size_t>(i)];
    const double phase = rng.uniform() * kTau;
    for (int cc = 0; cc < c; ++cc) {
      const double chan_phase = phase + cc * 0.7;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const double signal = std::sin(
              kTau * (fy[cls] * static_cast<double>(y) / h +
                      fx[cls] * static_cast<double>(x) / w) +
              chan_phase);
          *p++ = signal + 0.3 * rng.normal();
        }
    }
  }
  return ds;
}

constexpr int kMotifLen = 3;

std::vector<double> make_motifs(int classes, int d, Rng& motif_rng) {
  std::vector<double> motifs(static_cast<std::size_t>(classes * kMotifLen * d));
  for (int cls = 0; cls < classes; ++cls) {
    for (int dd = 0; dd < d; ++dd) {
      double mean = 0.0;
      for (int t = 0; t < kMotifLen; ++t) {
        double v = motif_rng.normal() * 2.0;
        motifs[static_cast<std::size_t>((cls * kMotifLen + t) * d + dd)] = v;
        mean += v;
      }
      mean /= kMotifLen;
      // Zero time-mean per dimension kills the mean-pooled signal.
      for (int t = 0; t < kMotifLen; ++t)
        motifs[static_cast<std::size_t>((cls * kMotifLen + t) * d + dd)] -= mean;
    }
  }
  return motifs;
}

// Planted zero-mean token motifs at a random position in a noisy sequence.
Dataset col_motifs_split(int n, Rng& rng, const std::vector<double>& motifs) {
  const int s = 32, d = 8, classes = 5, motif_len = kMotifLen;
  Dataset ds;
  ds.labels = balanced_labels(n, classes, rng);
  ds.inputs = Tensor({n, s, d});
  double* p = ds.inputs.ptr();
  for (int i = 0; i < n; ++i) {
    const int cls = ds.labels[static_cast<std::size_t>(i)];
    const int pos = static_cast<int>(rng.uniform_int(s - motif_len + 1));
    for (int t = 0; t < s; ++t)
      for (int dd = 0; dd < d; ++dd) {
        double v = 0.4 * rng.normal();
        if (t >= pos && t < pos + motif_len)
          v += motifs[static_cast<std::size_t>((cls * motif_len + (t - pos)) * d + dd)];
        *p++ = v;
      }
  }
  return ds;
}

// Frequency discrimination on a single channel.
Dataset waves_split(int n, Rng& rng) {
  const int s = 64, d = 1, classes = 3;
  static const int freq[] = {2, 5, 9};
  Dataset ds;
  ds.labels = balanced_labels(n, classes, rng);
  ds.inputs = Tensor({n, s, d});
  double* p = ds.inputs.ptr();
  for (int i = 0; i < n; ++i) {
    const int cls = ds.labels[static_cast<std::size_t>(i)];
    const double phase = rng.uniform() * kTau;
    for (int t = 0; t < s; ++t)
      *p++ = std::sin(kTau * freq[cls] * static_cast<double>(t) / s + phase) +
             0.3 * rng.normal();
  }
  return ds;
}

}  // namespace

std::vector<std::string> synthetic_task_ids() {
  return {"im-patterns", "col-motifs", "1d-waves"};
}

SyntheticTask make_synthetic_task(const std::string& task_id,
                                  std::uint64_t seed) {
  SyntheticTask task;
  task.task_id = task_id;
  task.seed = seed;
  Rng rng(seed ^ 0x5eedf00dULL);
  Rng train_rng = rng.split();
  Rng val_rng = rng.split();

  if (task_id == "im-patterns") {
    task.input_state = make_im_state(3, 16, 16);
    task.num_classes = 4;
    task.train = im_patterns_split(kTrainSize, train_rng);
    task.val = im_patterns_split(kValSize, val_rng);
  } else if (task_id == "col-motifs") {
    task.input_state = make_col_state(32, 8);
    task.num_classes = 5;
    Rng motif_rng(seed ^ 0x0123456789abcdefULL);
    const auto motifs = make_motifs(task.num_classes, 8, motif_rng);
    task.train = col_motifs_split(kTrainSize, train_rng, motifs);
    task.val = col_motifs_split(kValSize, val_rng, motifs);
  } else if (task_id == "1d-waves") {
    task.input_state = make_col_state(64, 1);
    task.num_classes = 3;
    task.train = waves_split(kTrainSize, train_rng);
    task.val = waves_split(kValSize, val_rng);
  } else {
    throw std::invalid_argument("unknown task id: " + task_id);
  }
  return task;
}

}  // namespace arbor
