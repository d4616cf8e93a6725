#pragma once

#include <filesystem>
#include <functional>
#include <string>

#include "pivm/error.hpp"

namespace testing {

/// Kind of the pivm::Error thrown by fn; internal if none (or another type) is thrown.
inline pivm::ErrorKind kind_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const pivm::Error& e) {
        return e.kind();
    } catch (...) {
    }
    return pivm::ErrorKind::internal;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch(const std::string& name) {
    const auto p = std::filesystem::temp_directory_path() / ("pivm_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace testing
