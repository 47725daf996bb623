#include "difrc/prompt.hpp"

#include <string>

namespace difrc {

PromptTable::PromptTable(int num_classes, int width, Rng& rng)
    : num_classes_(num_classes), width_(width) {
  if (num_classes < 1 || width < 1) throw ConfigError("prompt table needs classes >= 1 and width >= 1");
  table_ = store_.add("prompt.table", width, num_classes + 3);
  auto t = store_.mat(table_);
  for (Eigen::Index j = 0; j < t.cols(); ++j) {
    for (Eigen::Index i = 0; i < t.rows(); ++i) t(i, j) = static_cast<real>(standard_normal(rng));
  }
}

Vec PromptTable::row(int id) const {
  if (id < 0 || id >= rows()) {
    throw RangeError("unknown prompt id " + std::to_string(id) + " (table has " +
                     std::to_string(rows()) + " rows)");
  }
  return store_.mat(table_).col(id);
}

Mat PromptTable::gather(std::span<const int> ids) const {
  Mat out(width_, static_cast<Eigen::Index>(ids.size()));
  for (std::size_t i = 0; i < ids.size(); ++i) out.col(static_cast<Eigen::Index>(i)) = row(ids[i]);
  return out;
}

Vec embed_prompt(int id, const PromptTable& table) { return table.row(id); }

}  // namespace difrc
