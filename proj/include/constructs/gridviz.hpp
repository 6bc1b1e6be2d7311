#pragma once

// Qualitative comparison grids: one column per method/variant, one row per
// sample, column headers rendered with a built-in 5x7 bitmap font.

#include <string>
#include <vector>

#include "constructs/image.hpp"

namespace constructs {

struct GridColumn {
  std::string label;
  std::vector<Image> images;
};

// All columns must hold the same number of images. Cells are sized to the
// largest image; smaller ones are centered. Output is a metric-range RGB
// image ready for save_image_png.
Image make_grid(const std::vector<GridColumn>& columns, int gutter = 2);

// Renders text into an image at the given top-left corner (used for the
// column headers; exposed for tests). Unknown characters draw as blanks.
void draw_text(Image& canvas, const std::string& text, int top, int left, float value);

}  // namespace constructs
