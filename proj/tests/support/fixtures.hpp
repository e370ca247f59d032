#pragma once

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <unistd.h>

#include "capiqa/numerics/parameters.hpp"

namespace capiqa::testing {

/// Overwrites the values of a named parameter in place.
template <class T>
void set_param(const ParameterSet<T>& ps, const std::string& name, const std::vector<T>& values) {
    auto t = ps.get(name);
    auto data = t.mutable_data();
    if (data.size() != values.size()) throw ContractError("set_param: size mismatch for " + name);
    std::copy(values.begin(), values.end(), data.begin());
}

/// Fills every parameter whose name satisfies `pick` with `v`.
template <class T>
void fill_params(const ParameterSet<T>& ps, const std::function<bool(const std::string&)>& pick, T v) {
    for (const auto& p : ps.all()) {
        if (!pick(p.name)) continue;
        auto t = p.tensor;
        std::fill(t.mutable_data().begin(), t.mutable_data().end(), v);
    }
}

template <class T>
void fill_all(const ParameterSet<T>& ps, T v) {
    fill_params<T>(ps, [](const std::string&) { return true; }, v);
}

/// Fresh directory under the system temp path, removed on destruction.
class TempDir {
public:
    TempDir() {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("capiqa-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
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
    std::string operator/(const std::string& leaf) const { return (path_ / leaf).string(); }

private:
    std::filesystem::path path_;
};

}  // namespace capiqa::testing
