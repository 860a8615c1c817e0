#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace n2m {

enum class Task { SS, CD };

// Model heads: the two task heads plus the denoising reconstruction head
// used only during self-supervised pretraining.
enum class Head { SS, CD, Pretrain };

inline const char* to_string(Task t) { return t == Task::SS ? "ss" : "cd"; }
inline const char* to_string(Head h) {
    switch (h) {
        case Head::SS: return "ss";
        case Head::CD: return "cd";
        default: return "pretrain";
    }
}

inline Head head_of(Task t) { return t == Task::SS ? Head::SS : Head::CD; }

// Error taxonomy. Every failure surfaced to the CLI carries a one-word
// category so the command can exit with a single diagnostic line.
class Error : public std::runtime_error {
public:
    Error(std::string category, const std::string& msg)
        : std::runtime_error(msg), category_(std::move(category)) {}
    const std::string& category() const { return category_; }

private:
    std::string category_;
};

struct ParamError : Error {
    explicit ParamError(const std::string& m) : Error("parameter", m) {}
};
struct RangeError : Error {
    explicit RangeError(const std::string& m) : Error("range", m) {}
};
struct ShapeError : Error {
    explicit ShapeError(const std::string& m) : Error("shape", m) {}
};
struct DataError : Error {
    explicit DataError(const std::string& m) : Error("data", m) {}
};
struct LabelError : Error {
    explicit LabelError(const std::string& m) : Error("label", m) {}
};
struct ConfigError : Error {
    explicit ConfigError(const std::string& m) : Error("config", m) {}
};
struct ManifestError : Error {
    explicit ManifestError(const std::string& m) : Error("manifest", m) {}
};
struct SizeError : Error {
    explicit SizeError(const std::string& m) : Error("size", m) {}
};
struct NumericError : Error {
    explicit NumericError(const std::string& m) : Error("numeric", m) {}
};
struct InputError : Error {
    explicit InputError(const std::string& m) : Error("input", m) {}
};
struct IoError : Error {
    explicit IoError(const std::string& m) : Error("io", m) {}
};

}  // namespace n2m
