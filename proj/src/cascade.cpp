#include "clk/cascade.hpp"

#include <array>
#include <cmath>
#include <limits>
#include <string>

#include "clk/errors.hpp"
#include "clk/glk.hpp"
#include "clk/rng.hpp"
#include "clk/sdm.hpp"

namespace clk {

std::uint64_t cascade_layer_seed(std::uint64_t seed, int layer) {
  return mix64(seed, 0x6c617965ULL, static_cast<std::uint64_t>(layer));
}

namespace {

std::uint64_t layer_seed(std::uint64_t seed, int layer) {
  return cascade_layer_seed(seed, layer);
}

std::uint64_t validation_seed(std::uint64_t seed) {
  return mix64(seed, 0x76616c69ULL);
}

/// Re-raises the in-flight trainer error with the failing layer prepended.
[[noreturn]] void rethrow_with_layer(int layer) {
  const std::string prefix = "layer " + std::to_string(layer + 1) + ": ";
  try {
    throw;
  } catch (const RankDeficient& e) {
    throw RankDeficient(prefix + e.what());
  } catch (const SingularSystem& e) {
    throw SingularSystem(prefix + e.what());
  } catch (const UnderdeterminedSite& e) {
    throw UnderdeterminedSite(prefix + e.what(), e.site_index);
  } catch (const SingularHessian& e) {
    throw SingularHessian(prefix + e.what());
  } catch (const SingularWarp& e) {
    throw SingularWarp(prefix + e.what());
  } catch (const DegenerateConfiguration& e) {
    throw DegenerateConfiguration(prefix + e.what());
  } catch (const ShapeMismatch& e) {
    throw ShapeMismatch(prefix + e.what());
  }
}

void check_inputs(const MultiChannelImage& img, const WarpParams& p_gt,
                  const CascadeTrainConfig& cfg) {
  // Raw takes the image's channels as they come; LBP8 expects the image to
  // already be the 8-plane transform.
  if (cfg.descriptor == Descriptor::LBP8 &&
      img.channels() != descriptor_channels(Descriptor::LBP8))
    throw WrongChannelCount("LBP8 training expects an 8-channel image");
  if (cfg.layers < 1) throw ConfigError("need at least one layer");
  (void)p_gt;
}

template <typename TrainLayer>
RegressorCascade train_generic(const MultiChannelImage& img,
                               const WarpParams& p_gt, const SamplingGrid& grid,
                               const CascadeTrainConfig& cfg,
                               TrainLayer&& train_layer) {
  check_inputs(img, p_gt, cfg);
  RegressorCascade cascade;
  cascade.family = p_gt.family;
  cascade.grid = grid;
  cascade.channels = img.channels();
  cascade.descriptor = cfg.descriptor;
  for (int l = 0; l < cfg.layers; ++l) {
    try {
      const PerturbationConfig pcfg{cfg.sigma, cfg.n_per_layer,
                                    layer_seed(cfg.seed, l)};
      TrainingSet set = generate_set(img, p_gt, grid, pcfg);
      if (cfg.propagate && !cascade.layers.empty())
        set = propagate_perturbations(img, p_gt, set, cascade);
      cascade.layers.push_back(train_layer(set));
    } catch (...) {
      rethrow_with_layer(l);
    }
  }
  return cascade;
}

}  // namespace

RegressorCascade iclk_train_cascade(const MultiChannelImage& img,
                                    const WarpParams& p_gt,
                                    const SamplingGrid& grid,
                                    const CascadeTrainConfig& cfg) {
  check_inputs(img, p_gt, cfg);
  RegressorCascade cascade;
  cascade.family = p_gt.family;
  cascade.grid = grid;
  cascade.channels = img.channels();
  cascade.descriptor = cfg.descriptor;
  cascade.iterative = true;
  cascade.layers.push_back(iclk_build(img, p_gt, p_gt.family, grid));
  return cascade;
}

RegressorCascade glk_train_cascade(const MultiChannelImage& img,
                                   const WarpParams& p_gt,
                                   const SamplingGrid& grid,
                                   const CascadeTrainConfig& cfg) {
  return train_generic(img, p_gt, grid, cfg, [&](const TrainingSet& set) {
    RegressorLayer layer;
    GradientParams g = glk_train(set, p_gt.family, grid);
    layer.R = build_R_from_g(g, p_gt.family, grid);
    layer.template_vec = set.template_vec;
    layer.g = std::move(g);
    return layer;
  });
}

RegressorCascade clk_train_cascade(const MultiChannelImage& img,
                                   const WarpParams& p_gt,
                                   const SamplingGrid& grid,
                                   const CascadeTrainConfig& cfg) {
  return train_generic(img, p_gt, grid, cfg, [&](const TrainingSet& set) {
    RegressorLayer layer;
    GradientParams g = clk_train(set, p_gt.family, grid, cfg.lm);
    layer.R = build_R_from_g(g, p_gt.family, grid);
    layer.template_vec = set.template_vec;
    layer.g = std::move(g);
    return layer;
  });
}

namespace {

struct ValidationScore {
  double frequency = -1.0;
  double mean_rmse = std::numeric_limits<double>::infinity();
};

ValidationScore validate_cascade(const MultiChannelImage& img,
                                 const WarpParams& p_gt,
                                 const RegressorCascade& cascade,
                                 const CascadeTrainConfig& cfg) {
  const PerturbationConfig pcfg{cfg.sigma, cfg.n_per_layer,
                                validation_seed(cfg.seed)};
  const Corners corners = cascade.grid.corners();
  int converged = 0;
  double rmse_sum = 0;
  for (int i = 0; i < pcfg.n_samples; ++i) {
    auto rng = derive_stream(pcfg.seed, static_cast<std::uint64_t>(i));
    const WarpParams dp = perturb_warp(p_gt.family, corners, pcfg, rng);
    const AlignResult res =
        run_cascade(img, compose(p_gt, dp), cascade, 30, &p_gt);
    converged += res.converged ? 1 : 0;
    rmse_sum += res.rmse_per_iteration.back();
  }
  return {static_cast<double>(converged) / pcfg.n_samples,
          rmse_sum / pcfg.n_samples};
}

}  // namespace

RegressorCascade sdm_train_cascade(const MultiChannelImage& img,
                                   const WarpParams& p_gt,
                                   const SamplingGrid& grid,
                                   const CascadeTrainConfig& cfg) {
  auto train_with = [&](double lambda) {
    return train_generic(img, p_gt, grid, cfg, [&](const TrainingSet& set) {
      return sdm_train_layer(set, lambda);
    });
  };
  if (cfg.sdm_lambda >= 0) return train_with(cfg.sdm_lambda);

  // Grid-search the ridge weight: candidates scale with the energy of the
  // base layer's residuals, the winner is picked by convergence frequency
  // on a held-out validation set (ties: lower mean RMSE, then larger
  // lambda, which shrinks more).
  const PerturbationConfig base_cfg{cfg.sigma, cfg.n_per_layer,
                                    layer_seed(cfg.seed, 0)};
  const TrainingSet base = generate_set(img, p_gt, grid, base_cfg);
  double energy = 0;  // trace(X X^T)
  for (const TrainingPair& pair : base.pairs)
    energy += (pair.feature - base.template_vec).squaredNorm();
  const double scale = energy / static_cast<double>(base.template_vec.size());

  constexpr std::array<double, 7> kMultipliers = {1e-4, 1e-3, 1e-2, 1e-1,
                                                  1.0,  1e1,  1e2};
  RegressorCascade best;
  ValidationScore best_score;
  for (double mult : kMultipliers) {
    RegressorCascade candidate = train_with(mult * scale);
    const ValidationScore score = validate_cascade(img, p_gt, candidate, cfg);
    const bool better =
        score.frequency > best_score.frequency ||
        (score.frequency == best_score.frequency &&
         score.mean_rmse <= best_score.mean_rmse);
    if (better) {
      best = std::move(candidate);
      best_score = score;
    }
  }
  return best;
}

RegressorCascade swap_family(const RegressorCascade& cascade,
                             WarpFamily new_family) {
  RegressorCascade out = cascade;
  out.family = new_family;
  for (std::size_t l = 0; l < out.layers.size(); ++l) {
    if (!out.layers[l].g)
      throw ConfigError("layer " + std::to_string(l + 1) +
                        " retains no gradients; the cascade cannot be swapped");
    try {
      out.layers[l].R = build_R_from_g(*out.layers[l].g, new_family, out.grid);
    } catch (const RankDeficient& e) {
      throw RankDeficient("layer " + std::to_string(l + 1) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace clk
