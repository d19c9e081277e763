#pragma once

#include <stdexcept>
#include <string>

namespace protomsl {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ManifestError : public Error {
public:
    ManifestError(const std::string& what, int row = 0)
        : Error(row > 0 ? "row " + std::to_string(row) + ": " + what : what), row_(row) {}
    int row() const { return row_; }

private:
    int row_;
};

class SplitError : public Error { using Error::Error; };
class AugmentError : public Error { using Error::Error; };
class DimensionError : public Error { using Error::Error; };
class ImageError : public Error { using Error::Error; };
class ArchiveError : public Error { using Error::Error; };
class CalibrationError : public Error { using Error::Error; };
class ExplainError : public Error { using Error::Error; };
class MetricsError : public Error { using Error::Error; };

class CheckpointVersionError : public ArchiveError { using ArchiveError::ArchiveError; };

class TrainingDiverged : public Error {
public:
    explicit TrainingDiverged(int epoch)
        : Error("non-finite loss at epoch " + std::to_string(epoch)), epoch_(epoch) {}
    int epoch() const { return epoch_; }

private:
    int epoch_;
};

}  // namespace protomsl
