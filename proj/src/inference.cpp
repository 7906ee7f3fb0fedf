#include "gmln/inference.hpp"

namespace gmln {

std::vector<std::uint8_t> argmax_labels(const Tensor& logits) {
  if (logits.rank() != 5) throw ShapeError("argmax: expected (B, C, D, H, W), got " + to_string(logits.shape()));
  const auto B = logits.dim(0), C = logits.dim(1);
  const auto V = logits.dim(2) * logits.dim(3) * logits.dim(4);
  std::vector<std::uint8_t> out(static_cast<std::size_t>(B * V));
  dispatch(logits.dtype(), [&]<class T>(T) {
    auto x = logits.data<T>();
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t i = 0; i < V; ++i) {
        std::int64_t best = 0;
        for (std::int64_t c = 1; c < C; ++c)
          if (x[(b * C + c) * V + i] > x[(b * C + best) * V + i]) best = c;
        out[b * V + i] = static_cast<std::uint8_t>(best);
      }
  });
  return out;
}

Volume segment(const GmlnModel& model, const Study& study) {
  const Study* one[] = {&study};
  return Volume::labels(study.dims(), argmax_labels(model.predict(batch_inputs(one, model.config().dtype))));
}

Evaluation evaluate(const GmlnModel& model, std::span<const Study* const> studies, int batch_size) {
  Evaluation ev;
  double acc = 0;
  for (std::size_t i = 0; i < studies.size(); i += static_cast<std::size_t>(batch_size)) {
    auto batch = studies.subspan(i, std::min<std::size_t>(static_cast<std::size_t>(batch_size), studies.size() - i));
    const auto pred = argmax_labels(model.predict(batch_inputs(batch, model.config().dtype)));
    std::size_t off = 0;
    for (const auto* s : batch) {
      if (!s->labels) throw DataError("evaluate: study " + s->id + " has no labels");
      const auto n = s->labels->u8.size();
      auto rep = region_dice(std::span(pred).subspan(off, n), s->labels->u8);
      off += n;
      acc += rep.mean;
      ev.studies.push_back({s->id, rep});
    }
  }
  ev.mean_dice = ev.studies.empty() ? 0.0 : acc / static_cast<double>(ev.studies.size());
  return ev;
}

}  // namespace gmln
