#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <unistd.h>

#include "lvseg/core.hpp"

namespace lvseg::test {

// Fresh scratch directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("lvseg-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

inline Mask random_mask(int rows, int cols, double density, std::mt19937_64& rng) {
    std::bernoulli_distribution on(density);
    Mask m(rows, cols);
    for (auto& v : m.values()) v = on(rng) ? 1 : 0;
    return m;
}

inline Image random_image(int rows, int cols, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Image img(rows, cols);
    for (auto& v : img.values()) v = u(rng);
    return img;
}

}  // namespace lvseg::test
