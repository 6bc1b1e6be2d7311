#include "constructs/gridviz.hpp"

#include <algorithm>
#include <cctype>
#include <stdexcept>

namespace constructs {

namespace {

// 5x7 glyphs, one byte per row, low 5 bits used, MSB-side bit is the left
// column. Covers digits, uppercase letters and the few separators that show
// up in method names; lowercase input is uppercased before lookup.
struct Glyph {
  char ch;
  unsigned char rows[7];
};

constexpr Glyph kFont[] = {
    {' ', {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00}},
    {'-', {0x00, 0x00, 0x00, 0x0E, 0x00, 0x00, 0x00}},
    {'_', {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F}},
    {'.', {0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C}},
    {'/', {0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10}},
    {'=', {0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00}},
    {'0', {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}},
    {'1', {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E}},
    {'2', {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}},
    {'3', {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E}},
    {'4', {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}},
    {'5', {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E}},
    {'6', {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}},
    {'7', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08}},
    {'8', {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}},
    {'9', {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}},
    {'A', {0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
    {'B', {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E}},
    {'C', {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E}},
    {'D', {0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C}},
    {'E', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F}},
    {'F', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10}},
    {'G', {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F}},
    {'H', {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
    {'I', {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E}},
    {'J', {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C}},
    {'K', {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11}},
    {'L', {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F}},
    {'M', {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11}},
    {'N', {0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11}},
    {'O', {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}},
    {'P', {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10}},
    {'Q', {0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D}},
    {'R', {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11}},
    {'S', {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E}},
    {'T', {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04}},
    {'U', {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}},
    {'V', {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04}},
    {'W', {0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A}},
    {'X', {0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11}},
    {'Y', {0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04}},
    {'Z', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F}},
};

const unsigned char* glyph_rows(char c) {
  const char up = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  for (const auto& g : kFont)
    if (g.ch == up) return g.rows;
  return kFont[0].rows;
}

constexpr int kGlyphW = 5, kGlyphH = 7, kGlyphAdvance = 6;
constexpr int kHeaderPad = 3;
constexpr float kBackground = 0.12f;
constexpr float kTextValue = 0.92f;

void blit(Image& canvas, const Image& cell, int top, int left) {
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < cell.height(); ++y)
      for (int x = 0; x < cell.width(); ++x)
        canvas.data.at(c, top + y, left + x) =
            cell.channels() == 3 ? cell.data.at(c, y, x) : cell.data.at(0, y, x);
}

}  // namespace

void draw_text(Image& canvas, const std::string& text, int top, int left, float value) {
  int x0 = left;
  for (char ch : text) {
    const unsigned char* rows = glyph_rows(ch);
    for (int y = 0; y < kGlyphH; ++y)
      for (int x = 0; x < kGlyphW; ++x) {
        if (!(rows[y] >> (kGlyphW - 1 - x) & 1)) continue;
        const int py = top + y, px = x0 + x;
        if (py < 0 || py >= canvas.height() || px < 0 || px >= canvas.width()) continue;
        for (int c = 0; c < canvas.channels(); ++c) canvas.data.at(c, py, px) = value;
      }
    x0 += kGlyphAdvance;
  }
}

Image make_grid(const std::vector<GridColumn>& columns, int gutter) {
  if (columns.empty()) throw std::invalid_argument("grid: no columns");
  if (gutter < 0) throw std::invalid_argument("grid: negative gutter");
  const std::size_t rows = columns[0].images.size();
  if (!rows) throw std::invalid_argument("grid: empty columns");
  for (const auto& col : columns)
    if (col.images.size() != rows)
      throw std::invalid_argument("grid: column '" + col.label + "' holds " +
                                  std::to_string(col.images.size()) + " images, expected " +
                                  std::to_string(rows));

  int cell_h = 0, cell_w = 0;
  for (const auto& col : columns)
    for (const auto& img : col.images) {
      cell_h = std::max(cell_h, img.height());
      cell_w = std::max(cell_w, img.width());
    }

  const int header_h = kGlyphH + 2 * kHeaderPad;
  const int n_cols = static_cast<int>(columns.size());
  const int n_rows = static_cast<int>(rows);
  const int width = n_cols * cell_w + (n_cols + 1) * gutter;
  const int height = header_h + n_rows * cell_h + (n_rows + 1) * gutter;

  Image canvas{Tensor<float>::full({3, height, width}, kBackground), kMetricRange};
  for (int c = 0; c < n_cols; ++c) {
    const int cx = gutter + c * (cell_w + gutter);
    const int text_w = static_cast<int>(columns[static_cast<std::size_t>(c)].label.size()) *
                       kGlyphAdvance;
    draw_text(canvas, columns[static_cast<std::size_t>(c)].label, kHeaderPad,
              cx + std::max(0, (cell_w - text_w) / 2), kTextValue);
    for (int r = 0; r < n_rows; ++r) {
      const Image cell =
          to_metric(columns[static_cast<std::size_t>(c)].images[static_cast<std::size_t>(r)]);
      const int cy = header_h + gutter + r * (cell_h + gutter);
      blit(canvas, cell, cy + (cell_h - cell.height()) / 2, cx + (cell_w - cell.width()) / 2);
    }
  }
  return canvas;
}

}  // namespace constructs
