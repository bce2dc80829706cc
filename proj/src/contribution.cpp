#include "bevfuse/contribution.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace bevfuse {

ContributionMap contribution_maps(const Tensor& f_c_hat, const Tensor& f_r_hat) {
  check_same_shape(f_c_hat, f_r_hat, "contribution_maps");
  BEVFUSE_CHECK(f_c_hat.rank() == 3, ShapeError, "contribution_maps: maps must be [C,ny,nx]");
  const int c = f_c_hat.extent(0), ny = f_c_hat.extent(1), nx = f_c_hat.extent(2);
  const std::int64_t hw = static_cast<std::int64_t>(ny) * nx;
  ContributionMap out{Tensor({ny, nx}), Tensor({ny, nx})};
  for (std::int64_t i = 0; i < hw; ++i) {
    double nc = 0.0, nr = 0.0;
    for (int ch = 0; ch < c; ++ch) {
      const double vc = f_c_hat[ch * hw + i];
      const double vr = f_r_hat[ch * hw + i];
      nc += vc * vc;
      nr += vr * vr;
    }
    nc = std::sqrt(nc);
    nr = std::sqrt(nr);
    const double cam = nc + nr > 0.0 ? nc / (nc + nr) : 0.5;
    out.cam[i] = cam;
    out.rad[i] = 1.0 - cam;
  }
  return out;
}

StratifiedReport stratify(const std::vector<Detection>& dets, const ContributionMap& cmap,
                          const BevGrid& grid, const std::vector<double>& dist_edges,
                          std::array<double, 2> origin) {
  BEVFUSE_CHECK(dist_edges.size() >= 2, ConfigError, "stratify: need at least one distance bin");
  for (std::size_t i = 1; i < dist_edges.size(); ++i)
    BEVFUSE_CHECK(dist_edges[i] > dist_edges[i - 1], ConfigError,
                  "stratify: distance edges must increase");
  const int n_bins = static_cast<int>(dist_edges.size()) - 1;

  StratifiedReport rep;
  std::vector<double> sum_cam(static_cast<std::size_t>(kNumClasses * n_bins), 0.0);
  std::vector<int> count(static_cast<std::size_t>(kNumClasses * n_bins), 0);
  for (const Detection& d : dets) {
    const auto cell = world_to_cell(d.box.cx, d.box.cy, grid);
    if (!cell) {
      ++rep.skipped_outside_grid;
      continue;
    }
    const double dist = std::hypot(d.box.cx - origin[0], d.box.cy - origin[1]);
    int bin = -1;
    for (int b = 0; b < n_bins; ++b)
      if (dist >= dist_edges[static_cast<std::size_t>(b)] &&
          dist < dist_edges[static_cast<std::size_t>(b) + 1]) {
        bin = b;
        break;
      }
    if (bin < 0 || d.box.class_id < 0 || d.box.class_id >= kNumClasses) {
      ++rep.skipped_outside_grid;
      continue;
    }
    const std::size_t key = static_cast<std::size_t>(d.box.class_id * n_bins + bin);
    sum_cam[key] += cmap.cam.at(cell->second, cell->first);
    ++count[key];
  }
  for (int cls = 0; cls < kNumClasses; ++cls)
    for (int b = 0; b < n_bins; ++b) {
      StratifiedRow row;
      row.class_id = cls;
      row.dist_lo = dist_edges[static_cast<std::size_t>(b)];
      row.dist_hi = dist_edges[static_cast<std::size_t>(b) + 1];
      row.count = count[static_cast<std::size_t>(cls * n_bins + b)];
      if (row.count > 0) {
        row.mean_cam = sum_cam[static_cast<std::size_t>(cls * n_bins + b)] / row.count;
        row.mean_rad = 1.0 - *row.mean_cam;
      }
      rep.rows.push_back(row);
    }
  return rep;
}

std::string stratified_csv(const StratifiedReport& report) {
  std::ostringstream os;
  os << "class,dist_lo,dist_hi,mean_c,mean_r,count\n";
  char buf[160];
  for (const StratifiedRow& r : report.rows) {
    if (r.mean_cam) {
      std::snprintf(buf, sizeof buf, "%s,%.1f,%.1f,%.6f,%.6f,%d\n", class_name(r.class_id),
                    r.dist_lo, r.dist_hi, *r.mean_cam, *r.mean_rad, r.count);
    } else {
      std::snprintf(buf, sizeof buf, "%s,%.1f,%.1f,,,%d\n", class_name(r.class_id), r.dist_lo,
                    r.dist_hi, r.count);
    }
    os << buf;
  }
  return os.str();
}

std::string contribution_csv(const Tensor& map) {
  std::ostringstream os;
  char buf[32];
  for (int iy = 0; iy < map.extent(0); ++iy) {
    for (int ix = 0; ix < map.extent(1); ++ix) {
      std::snprintf(buf, sizeof buf, "%.6f", map.at(iy, ix));
      os << buf << (ix + 1 == map.extent(1) ? "" : ",");
    }
    os << "\n";
  }
  return os.str();
}

namespace {

void write_pgm(const std::string& path, const Tensor& map) {
  std::ofstream os(path, std::ios::binary);
  BEVFUSE_CHECK(os.is_open(), IoError, "cannot open for write: " + path);
  os << "P5 " << map.extent(1) << " " << map.extent(0) << " 255\n";
  for (std::int64_t i = 0; i < map.size(); ++i) {
    const double v = std::clamp(map[i], 0.0, 1.0);
    const unsigned char b = static_cast<unsigned char>(std::lround(v * 255.0));
    os.write(reinterpret_cast<const char*>(&b), 1);
  }
  BEVFUSE_CHECK(os.good(), IoError, "write failed: " + path);
}

}  // namespace

void export_contribution(const ContributionMap& cmap, const std::string& path_prefix) {
  {
    std::ofstream os(path_prefix + ".csv");
    BEVFUSE_CHECK(os.is_open(), IoError, "cannot open for write: " + path_prefix + ".csv");
    os << contribution_csv(cmap.cam);
    BEVFUSE_CHECK(os.good(), IoError, "write failed: " + path_prefix + ".csv");
  }
  write_pgm(path_prefix + "_cam.pgm", cmap.cam);
  write_pgm(path_prefix + "_rad.pgm", cmap.rad);
}

ContributionMap read_contribution_csv(const std::string& path) {
  std::ifstream is(path);
  BEVFUSE_CHECK(is.is_open(), IoError, "cannot open for read: " + path);
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cellv;
    while (std::getline(ss, cellv, ',')) row.push_back(std::stod(cellv));
    rows.push_back(std::move(row));
  }
  BEVFUSE_CHECK(!rows.empty(), ParseError, "empty contribution csv: " + path);
  const int ny = static_cast<int>(rows.size());
  const int nx = static_cast<int>(rows[0].size());
  ContributionMap out{Tensor({ny, nx}), Tensor({ny, nx})};
  for (int iy = 0; iy < ny; ++iy) {
    BEVFUSE_CHECK(static_cast<int>(rows[static_cast<std::size_t>(iy)].size()) == nx, ParseError,
                  "ragged contribution csv: " + path);
    for (int ix = 0; ix < nx; ++ix) {
      out.cam.at(iy, ix) = rows[static_cast<std::size_t>(iy)][static_cast<std::size_t>(ix)];
      out.rad.at(iy, ix) = 1.0 - out.cam.at(iy, ix);
    }
  }
  return out;
}

}  // namespace bevfuse
