#pragma once

#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace storyseq {

using Vec = std::vector<double>;

// All recoverable failures (bad input files, shape mismatches, invalid
// options) surface as this type; the CLI prints what() on one line.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Runs fn(i) for i in [0, n) on up to `threads` workers. Each index is
// visited exactly once; callers write results into per-index slots so the
// outcome does not depend on scheduling.
void parallel_for(std::size_t n, std::size_t threads,
                  const std::function<void(std::size_t)>& fn);

// Shortest round-trip decimal form; used for every text output so that
// repeated runs produce byte-identical files.
std::string format_double(double v);

}  // namespace storyseq
