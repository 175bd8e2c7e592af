#include "mapseg/io.hpp"

#include <png.h>
#include <zlib.h>

#include <cstdio>
#include <fstream>
#include <iterator>

#include "mapseg/config.hpp"
#include "mapseg/error.hpp"

namespace fs = std::filesystem;

namespace mapseg {
namespace {

constexpr int kManifestVersion = 1;

std::string frame_dir_name(int i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "frame_%05d", i);
    return buf;
}

std::vector<std::uint8_t> encode_png(const Raster& r, bool mask) {
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(r.width);
    img.height = static_cast<png_uint_32>(r.height);
    img.format = r.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    if (r.channels != 1 && r.channels != 3) {
        throw ShapeError("PNG rasters need 1 or 3 channels, got " + std::to_string(r.channels));
    }
    std::vector<std::uint8_t> interleaved(r.data.size());
    const std::size_t hw = static_cast<std::size_t>(r.height) * r.width;
    for (int c = 0; c < r.channels; ++c) {
        for (std::size_t p = 0; p < hw; ++p) {
            std::uint8_t v = r.data[c * hw + p];
            if (mask) v = v ? 255 : 0;
            interleaved[p * r.channels + c] = v;
        }
    }
    png_alloc_size_t size = 0;
    if (!png_image_write_get_memory_size(img, size, 0, interleaved.data(), 0, nullptr)) {
        throw IoError(std::string("PNG encode failed: ") + img.message);
    }
    std::vector<std::uint8_t> out(size);
    if (!png_image_write_to_memory(&img, out.data(), &size, 0, interleaved.data(), 0, nullptr)) {
        throw IoError(std::string("PNG encode failed: ") + img.message);
    }
    out.resize(size);
    return out;
}

Raster decode_png(const std::vector<std::uint8_t>& bytes, bool mask, const std::string& name) {
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size())) {
        throw FormatError(name + ": " + img.message);
    }
    const int channels = mask ? 1 : 3;
    img.format = mask ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    std::vector<std::uint8_t> interleaved(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, interleaved.data(), 0, nullptr)) {
        throw FormatError(name + ": " + img.message);
    }
    Raster r(channels, static_cast<int>(img.height), static_cast<int>(img.width));
    const std::size_t hw = static_cast<std::size_t>(r.height) * r.width;
    for (int c = 0; c < channels; ++c) {
        for (std::size_t p = 0; p < hw; ++p) {
            std::uint8_t v = interleaved[p * channels + c];
            if (mask) {
                if (v != 0 && v != 255) throw FormatError(name + ": mask value not 0/255");
                v = v ? 1 : 0;
            }
            r.data[c * hw + p] = v;
        }
    }
    return r;
}

void write_bytes(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream f(path, std::ios::binary);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("cannot write " + path.string());
}

std::string hex32(std::uint32_t v) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%08x", v);
    return buf;
}

json element_to_json(const MapElement& e) {
    json pts = json::array();
    for (const Vec2& p : e.points) pts.push_back({p.x, p.y});
    return {{"cls", class_key(e.cls)}, {"closed", e.closed}, {"points", pts}};
}

json camera_to_json(const Camera& c) {
    return {{"intrinsics", c.intrinsics},
            {"extrinsics", c.extrinsics},
            {"image_size", {c.image_height, c.image_width}}};
}

std::uint32_t frame_checksum(const json& files, const json& elements) {
    std::string blob = files.dump() + elements.dump();
    return static_cast<std::uint32_t>(
        ::crc32(0L, reinterpret_cast<const Bytef*>(blob.data()), static_cast<uInt>(blob.size())));
}

}  // namespace

std::uint32_t crc32_of(const std::vector<std::uint8_t>& bytes) {
    return static_cast<std::uint32_t>(
        ::crc32(0L, bytes.data(), static_cast<uInt>(bytes.size())));
}

std::vector<std::uint8_t> read_file(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& path, const std::string& bytes) {
    std::ofstream f(path, std::ios::binary);
    f << bytes;
    if (!f) throw IoError("cannot write " + path.string());
}

void write_png(const fs::path& path, const Raster& raster, bool mask) {
    write_bytes(path, encode_png(raster, mask));
}

Raster read_png(const fs::path& path, bool mask) {
    return decode_png(read_file(path), mask, path.string());
}

void save_dataset(const std::vector<SurroundFrame>& frames, const SceneConfig& config,
                  const fs::path& directory) {
    fs::create_directories(directory);
    json manifest;
    manifest["format"] = "mapseg-dataset";
    manifest["version"] = kManifestVersion;
    manifest["config"] = config;
    json entries = json::array();
    for (std::size_t i = 0; i < frames.size(); ++i) {
        const SurroundFrame& fr = frames[i];
        const std::string dir = frame_dir_name(static_cast<int>(i));
        fs::create_directories(directory / dir);
        json files = json::object();
        auto put = [&](const std::string& name, const Raster& r, bool mask) {
            const auto bytes = encode_png(r, mask);
            write_bytes(directory / dir / name, bytes);
            files[dir + "/" + name] = hex32(crc32_of(bytes));
        };
        for (std::size_t k = 0; k < fr.images.size(); ++k) {
            put("cam_" + std::to_string(k) + ".png", fr.images[k], false);
            put("uv_mask_" + std::to_string(k) + ".png", fr.uv_masks[k], true);
        }
        put("bev_mask.png", fr.bev_mask, true);
        json elements = json::array();
        for (const auto& e : fr.elements) elements.push_back(element_to_json(e));
        json cams = json::array();
        for (const auto& c : fr.rig.cameras) cams.push_back(camera_to_json(c));
        json entry;
        entry["index"] = i;
        entry["seed"] = fr.seed;
        entry["bev_range"] = {fr.bev_range.x_min, fr.bev_range.x_max, fr.bev_range.y_min,
                              fr.bev_range.y_max};
        entry["rig"] = cams;
        entry["elements"] = elements;
        entry["files"] = files;
        entry["checksum"] = hex32(frame_checksum(files, elements));
        entries.push_back(entry);
    }
    manifest["frames"] = entries;
    write_file(directory / "manifest.json", manifest.dump(1) + "\n");
}

Dataset load_dataset(const fs::path& directory) {
    const fs::path mpath = directory / "manifest.json";
    const std::string mname = mpath.string();
    if (!fs::exists(mpath)) throw FormatError(mname + ": manifest not found");
    json manifest;
    try {
        const auto bytes = read_file(mpath);
        manifest = json::parse(bytes.begin(), bytes.end());
    } catch (const json::exception& e) {
        throw FormatError(mname + ": " + e.what());
    }
    Dataset ds;
    try {
        if (manifest.at("format") != "mapseg-dataset" ||
            manifest.at("version").get<int>() != kManifestVersion) {
            throw FormatError(mname + ": unsupported dataset format");
        }
        ds.config = scene_config_from_json(manifest.at("config"));
        for (const json& entry : manifest.at("frames")) {
            SurroundFrame fr;
            fr.seed = entry.at("seed").get<std::uint64_t>();
            const auto br = entry.at("bev_range").get<std::vector<double>>();
            if (br.size() != 4) throw FormatError(mname + ": bev_range needs 4 values");
            fr.bev_range = {br[0], br[1], br[2], br[3]};
            for (const json& jc : entry.at("rig")) {
                Camera c;
                c.intrinsics = jc.at("intrinsics").get<std::array<double, 9>>();
                c.extrinsics = jc.at("extrinsics").get<std::array<double, 16>>();
                c.image_height = jc.at("image_size").at(0).get<int>();
                c.image_width = jc.at("image_size").at(1).get<int>();
                fr.rig.cameras.push_back(c);
            }
            for (const json& je : entry.at("elements")) {
                MapElement e;
                e.cls = class_from_key(je.at("cls").get<std::string>());
                e.closed = je.at("closed").get<bool>();
                for (const json& p : je.at("points")) {
                    e.points.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
                }
                fr.elements.push_back(std::move(e));
            }
            const json& files = entry.at("files");
            const std::string expected = hex32(frame_checksum(files, entry.at("elements")));
            if (entry.at("checksum").get<std::string>() != expected) {
                throw FormatError(mname + ": frame " + std::to_string(ds.frames.size()) +
                                  " checksum mismatch");
            }
            const std::string dir = frame_dir_name(static_cast<int>(ds.frames.size()));
            auto load = [&](const std::string& name, bool mask) {
                const std::string key = dir + "/" + name;
                const fs::path path = directory / dir / name;
                if (!files.contains(key)) throw FormatError(mname + ": no entry for " + key);
                if (!fs::exists(path)) throw FormatError(path.string() + ": missing file");
                const auto bytes = read_file(path);
                if (hex32(crc32_of(bytes)) != files.at(key).get<std::string>()) {
                    throw FormatError(path.string() + ": checksum mismatch");
                }
                return decode_png(bytes, mask, path.string());
            };
            for (std::size_t k = 0; k < fr.rig.cameras.size(); ++k) {
                fr.images.push_back(load("cam_" + std::to_string(k) + ".png", false));
                fr.uv_masks.push_back(load("uv_mask_" + std::to_string(k) + ".png", true));
            }
            fr.bev_mask = load("bev_mask.png", true);
            ds.frames.push_back(std::move(fr));
        }
    } catch (const json::exception& e) {
        throw FormatError(mname + ": " + e.what());
    }
    return ds;
}

}  // namespace mapseg
