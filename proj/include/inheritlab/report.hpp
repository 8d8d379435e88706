#pragma once

#include <optional>
#include <string>
#include <vector>

#include "inheritlab/das.hpp"

namespace ilab {

// Index of the cell with the highest IIA among cells without errors, or
// nothing when the maximum is shared or no cell succeeded.
std::optional<std::size_t> unique_argmax(const std::vector<SweepCell>& cells);

// IIA grid with columns: layer, role, setting, iia, mask_width, final_loss.
// Failed cells keep their row with empty metric fields.
void write_grid_csv(const std::vector<SweepCell>& cells, const std::string& path);
// Reads the output of write_sweep_csv or write_grid_csv.
std::vector<SweepCell> read_sweep_csv(const std::string& path);

// Layer x role heatmap. Rows run from the top layer down, columns follow
// all_roles(); the unique maximum is outlined.
std::string heatmap_svg(const std::vector<SweepCell>& cells, const std::string& title);
void write_text(const std::string& text, const std::string& path);

}  // namespace ilab
