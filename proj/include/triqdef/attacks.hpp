#pragma once

// Localized adversarial patches: crafting by projected sign-gradient ascent,
// application to image batches, success scoring and file storage.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "triqdef/autograd.hpp"
#include "triqdef/models.hpp"

namespace triqdef::attacks {

enum class Family {
    per_image_targeted,   // LAVAN-style: fixed location, targeted
    universal,            // GAP-style: one patch for any image, optionally any location
};

std::string to_string(Family f);
Family parse_family(const std::string& s);

struct PatchSpec {
    std::string id;
    Tensor pixels;                      // [C,h,w], values in [0,1]
    std::size_t image_height = 0;       // extent of the mask
    std::size_t image_width = 0;
    std::size_t row = 0;                // top-left corner
    std::size_t col = 0;
    int source_bits = 32;
    Family family = Family::per_image_targeted;
    std::optional<int> target_class;

    std::size_t channels() const { return pixels.dim(0); }
    std::size_t height() const { return pixels.dim(1); }
    std::size_t width() const { return pixels.dim(2); }
    /// Binary [image_height, image_width] mask of the patch rectangle.
    Tensor mask() const;
    /// Throws InvalidArgument if the rectangle leaves the image or a pixel
    /// lies outside [0,1].
    void validate() const;
    bool operator==(const PatchSpec& o) const;
};

/// Patch configuration that decides whether a patch counts as seen in
/// training.
struct PatchKey {
    std::size_t height = 0, width = 0, row = 0, col = 0;
    int source_bits = 32;
    auto operator<=>(const PatchKey&) const = default;
};

PatchKey key_of(const PatchSpec& p);
bool is_seen(const PatchSpec& p, const std::vector<PatchKey>& training_manifest);

struct AttackConfig {
    std::size_t iterations = 100;
    double step_size = 0.05;
    bool targeted = true;
    bool random_location = false;
    std::uint64_t seed = 0;
    /// Images per ascent step, drawn with the attack's generator; 0 uses all.
    std::size_t batch_size = 32;

    void validate() const;
};

/// Logits [N,K] of an image batch [N,C,H,W].
using Classifier = std::function<ad::Var(const ad::Var& images)>;

/// Classifier view of a model variant (weights enter as constants).
Classifier classifier(const models::VariantHandle& h);

/// x with the patch rectangle of every image replaced by the patch pixels.
/// Throws ShapeError when the patch does not fit or channels differ.
Tensor apply_patch(const Tensor& x, const PatchSpec& p);

struct PatchRequest {
    std::string id;
    std::size_t height = 6, width = 6;
    std::size_t row = 0, col = 0;
    Family family = Family::per_image_targeted;
    std::optional<int> target_class;
    int source_bits = 32;
};

/// Projected sign-gradient ascent on the patch pixels. Targeted attacks raise
/// the log-probability of the target class, untargeted ones the
/// cross-entropy of the true labels. With random_location the patch is placed
/// at a fresh random position per image and step. Deterministic in cfg.seed.
PatchSpec craft_patch(const Classifier& model, const Tensor& images, const std::vector<int>& labels,
                      const AttackConfig& cfg, const PatchRequest& req);

/// Targeted: share of clean-correct inputs that the patched input sends to the
/// target class. Untargeted: share of clean-correct inputs whose patched
/// prediction differs from the label. 0 when no input is clean-correct.
double attack_success_rate(const Classifier& model, const Tensor& images, const std::vector<int>& labels,
                           const PatchSpec& p, bool targeted);

/// Share of all inputs the model assigns to `target_class` after patching
/// (without patch when p is null).
double target_rate(const Classifier& model, const Tensor& images, int target_class, const PatchSpec* p = nullptr);

/// Predictions in chunks without building a graph.
std::vector<int> predict(const Classifier& model, const Tensor& images);

// Patch container: "TQPATCH1", u64-length-prefixed JSON header, then the
// pixel payload as little-endian doubles.
std::string encode_patch(const PatchSpec& p);
PatchSpec decode_patch(const std::string& bytes, const std::string& source);
void save_patch(const std::string& path, const PatchSpec& p);
PatchSpec load_patch(const std::string& path);

/// A pool directory holds one container per patch plus manifest.json.
void save_pool(const std::string& dir, const std::vector<PatchSpec>& patches);
std::vector<PatchSpec> load_pool(const std::string& dir);
/// Keys listed in a pool manifest (the training manifest for seen/unseen).
std::vector<PatchKey> load_manifest_keys(const std::string& dir);

} // namespace triqdef::attacks
