#pragma once
// Text-guided edits of an inverted embedding: a semantic delta added to every
// pseudo vector, style words appended to the prompt, and cross-attention on the
// style-word keys amplified by a factor c.

#include "invert3d/denoiser.hpp"
#include "invert3d/distill.hpp"
#include "invert3d/errors.hpp"
#include "invert3d/inversion.hpp"
#include "invert3d/text_embed.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace invert3d {

struct EditRequest {
  std::vector<std::string> source_words;
  std::vector<std::string> target_words;
  double lambda = 1.0;
  std::vector<std::string> style_words;
  double attention_factor = 2.0;
  std::uint64_t seed = 0;
  ControlMode mode = ControlMode::post_softmax;

  /// No delta and no style words; with lambda 0 and c = 1 the edit is an exact no-op.
  [[nodiscard]] bool trivial() const { return target_words.empty() && style_words.empty(); }
};

inline void validate(const EditRequest& r, const Vocabulary& vocab) {
  require(r.attention_factor >= 0.0, ErrorKind::configuration, "attention factor must be >= 0");
  require(std::isfinite(r.lambda), ErrorKind::configuration, "lambda must be finite");
  require(r.target_words.empty() || !r.source_words.empty(), ErrorKind::configuration,
          "a target text needs a source text to form the delta");
  for (const auto* list : {&r.source_words, &r.target_words, &r.style_words})
    for (const auto& w : *list)
      require(vocab.contains(w), ErrorKind::configuration, "word '" + w + "' is not in the vocabulary");
}

/// Everything a request resolves to before any sampling.
struct EditPlan {
  PseudoToken z_edit;
  PromptEmbedding prompt;
  AttentionControl control;
};

inline EditPlan plan_edit(const PseudoToken& z_star, const EditRequest& r, const Vocabulary& vocab) {
  validate(r, vocab);
  EditPlan p;
  const Eigen::RowVectorXd delta = r.target_words.empty() ? Eigen::RowVectorXd::Zero(vocab.dim())
                                                          : text_delta(r.target_words, r.source_words, vocab);
  p.z_edit = edit_embedding(z_star, delta, r.lambda);
  std::vector<std::string> words = {z_star.name};
  words.insert(words.end(), r.style_words.begin(), r.style_words.end());
  p.prompt = assemble_prompt(words, &p.z_edit, vocab);
  // Style keys sit after the pseudo block, one row per appended word.
  for (std::size_t i = 0; i < r.style_words.size(); ++i)
    p.control.token_indices.push_back(p.z_edit.count() + static_cast<int>(i));
  p.control.factor = r.attention_factor;
  p.control.active = !r.style_words.empty();
  p.control.mode = r.mode;
  return p;
}

struct PersonalizedViews {
  EditPlan plan;
  GeneratedViews views;
};

inline PersonalizedViews personalize_views(const PseudoToken& z_star, const EditRequest& r,
                                           const std::vector<Camera>& cameras, const FrozenModels& m, int steps,
                                           bool capture_maps = false) {
  require(!cameras.empty(), ErrorKind::configuration, "personalisation needs at least one camera");
  PersonalizedViews out;
  out.plan = plan_edit(z_star, r, m.vocab);
  out.views = generate_views(out.plan.prompt, cameras, m, steps, r.seed, &out.plan.control, capture_maps);
  return out;
}

/// SDS reconstruction from the edited prompt with the attention control active in every denoiser call.
inline ReconstructResult personalize_scene(const PseudoToken& z_star, const EditRequest& r, const SDSConfig& cfg,
                                           const Scene& initial, const FrozenModels& m,
                                           const ReconstructObserver& observer = {}) {
  const EditPlan plan = plan_edit(z_star, r, m.vocab);
  return reconstruct(plan.prompt, initial, cfg, m, &plan.control, observer);
}

}  // namespace invert3d
