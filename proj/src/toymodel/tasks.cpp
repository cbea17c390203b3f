// SPDX-License-Identifier: Apache-2.0

#include <string>

#include "rng.hpp"
#include "saobp/toymodel.hpp"

namespace saobp::toy {

std::string_view to_string(Task task) {
  return task == Task::MaskedCopy ? "masked-copy" : "long-range-match";
}

Task parse_task(std::string_view name) {
  if (name == "masked-copy") return Task::MaskedCopy;
  if (name == "long-range-match") return Task::LongRangeMatch;
  throw ValidationError("unknown task '" + std::string(name) + "'");
}

TaskSampler::TaskSampler(Task task, int vocab, int sequence_length, bool causal, std::uint64_t seed)
    : task_(task), vocab_(vocab), length_(sequence_length), causal_(causal), state_(seed) {
  if (vocab_ < kFirstContentToken + 2) throw ValidationError("task sampler: vocabulary too small");
  if (length_ < 4) throw ValidationError("task sampler: sequence length must be at least 4");
  if (task_ == Task::MaskedCopy && length_ % 2 != 0) {
    throw ValidationError("task sampler: masked-copy needs an even sequence length");
  }
}

std::uint64_t TaskSampler::draw() {
  detail::SplitMix64 rng(state_);
  const auto v = rng.next();
  state_ = rng.state();
  return v;
}

int TaskSampler::uniform_int(int lo, int hi) {
  const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
  return lo + static_cast<int>(draw() % span);
}

double TaskSampler::uniform01() { return static_cast<double>(draw() >> 11) * 0x1.0p-53; }

Example TaskSampler::next() {
  Example ex;
  ex.tokens.resize(static_cast<std::size_t>(length_));
  const int last_content = vocab_ - 1;
  if (task_ == Task::MaskedCopy) {
    const int half = length_ / 2;
    for (int p = 0; p < half; ++p) {
      const int t = uniform_int(kFirstContentToken, last_content);
      ex.tokens[static_cast<std::size_t>(p)] = t;
      ex.tokens[static_cast<std::size_t>(p + half)] = t;
    }
    const int first = causal_ ? half : 0;
    for (int p = first; p < length_; ++p) {
      if (uniform01() < 0.15) ex.targets.emplace_back(p, ex.tokens[static_cast<std::size_t>(p)]);
    }
    if (ex.targets.empty()) {
      const int p = uniform_int(first, length_ - 1);
      ex.targets.emplace_back(p, ex.tokens[static_cast<std::size_t>(p)]);
    }
    for (const auto& [p, t] : ex.targets) ex.tokens[static_cast<std::size_t>(p)] = kMaskToken;
  } else {
    ex.tokens[0] = kClsToken;
    for (int p = 1; p < length_; ++p) ex.tokens[static_cast<std::size_t>(p)] = uniform_int(kFirstContentToken, last_content);
    const bool match = uniform01() < 0.5;
    auto& tail = ex.tokens[static_cast<std::size_t>(length_ - 1)];
    if (match) {
      tail = ex.tokens[1];
    } else {
      while (tail == ex.tokens[1]) tail = uniform_int(kFirstContentToken, last_content);
    }
    const int read_at = causal_ ? length_ - 1 : 0;
    ex.targets.emplace_back(read_at, match ? kYesToken : kNoToken);
  }
  return ex;
}

std::vector<Example> TaskSampler::batch(int count) {
  std::vector<Example> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(next());
  return out;
}

}  // namespace saobp::toy
