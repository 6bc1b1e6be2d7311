#pragma once

#include "constructs/image.hpp"
#include "constructs/tensor.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace constructs {

// Integer class labels per pixel, [H,W]. Class 0 is background.
struct SegmentationMask {
  Tensor<int> labels;
  int num_classes = 0;

  int height() const { return labels.dim(0); }
  int width() const { return labels.dim(1); }
};

// One domain of an unpaired translation pair. Masks and group ids are
// optional; when present they run parallel to images.
struct DomainDataset {
  std::string domain_tag;
  std::vector<std::string> names;  // file stems in load order
  std::vector<Image> images;       // model range [-1,1]
  std::vector<SegmentationMask> masks;
  std::vector<int> group_ids;

  int size() const { return static_cast<int>(images.size()); }
  bool has_masks() const { return !masks.empty(); }
  bool has_groups() const { return !group_ids.empty(); }
};

// Layout on disk: <root>/<domain>/images/*.png, optional parallel
// <root>/<domain>/masks/*.png (single channel, pixel value = class id) and
// <root>/<domain>/groups.json mapping stem -> group id. Files load in
// lexicographic order. Missing directories, image/mask name or size
// mismatches and undeclared channel counts are fatal. Masks attach only when
// with_masks is set and a complete mask directory is present; partial
// coverage is fatal.
DomainDataset load_dataset(const std::string& root, const std::string& domain_tag,
                           bool with_masks = true);

void save_dataset(const DomainDataset& ds, const std::string& root);

void save_image_png(const Image& img, const std::string& path);
Image load_image_png(const std::string& path);  // model range
void save_mask_png(const SegmentationMask& mask, const std::string& path);
SegmentationMask load_mask_png(const std::string& path);

// Crop both an image and its mask with one shared plan so they stay aligned.
std::pair<Image, SegmentationMask> crop_resize_pair(const Image& img,
                                                    const SegmentationMask& mask, int out_h,
                                                    int out_w, CropMode mode,
                                                    std::uint64_t seed = 0);

SegmentationMask apply_crop_resize(const SegmentationMask& mask, const CropPlan& plan);

// Procedural two-domain toy problem. Domain X holds flat-colored shapes,
// domain Y the same shape vocabulary rendered as textures under a lighting
// gradient, with a deliberately skewed class-frequency profile. Both domains
// carry masks and round-robin group ids.
std::pair<DomainDataset, DomainDataset> make_toy_domains(int num_images, int image_size,
                                                         int num_classes, std::uint64_t seed,
                                                         int num_groups = 5);

// Total-variation distance between the per-class pixel histograms of two
// mask sets, in [0,1].
double class_frequency_tv(const std::vector<SegmentationMask>& a,
                          const std::vector<SegmentationMask>& b);

}  // namespace constructs
