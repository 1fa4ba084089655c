#pragma once

#include <cstdint>
#include <vector>

namespace plab {

// One record per evaluation step. excess_risk equals eval_loss because the
// conditional entropy of the clean task is zero.
struct MetricsRecord {
  std::int64_t step = 0;
  double train_loss = 0.0;
  double eval_loss = 0.0;
  double excess_risk = 0.0;
  double delta_z = 0.0;
  double grad_norm = 0.0;
  double lr_now = 0.0;
  std::int64_t tokens_processed = 0;

  bool operator==(const MetricsRecord&) const = default;
};

using MetricsStream = std::vector<MetricsRecord>;

}  // namespace plab
