#include "diffnaf/projection.hpp"

#include <cmath>
#include <string>

#include "diffnaf/errors.hpp"

namespace diffnaf {

void ProjectionSet::validate() const {
    geometry.validate();
    for (size_t i = 0; i < images.size(); ++i) {
        const auto& im = images[i];
        if (im.rows != geometry.det_rows || im.cols != geometry.det_cols)
            throw MismatchError("ProjectionSet: image detector dims differ from geometry");
        if (im.pixels.size() != im.n_pixels())
            throw MismatchError("ProjectionSet: pixel buffer size mismatch");
        if (!(im.weight > 0.0))
            throw InvalidArgumentError("ProjectionSet: image weight must be > 0");
        for (double p : im.pixels)
            if (!std::isfinite(p))
                throw InvalidArgumentError("ProjectionSet: non-finite pixel value");
        if (i > 0 && !(images[i - 1].angle_deg < im.angle_deg))
            throw InvalidArgumentError(
                "ProjectionSet: angles must be strictly increasing (duplicate angle " +
                std::to_string(im.angle_deg) + "?)");
    }
}

std::vector<double> ProjectionSet::angles() const {
    std::vector<double> a;
    a.reserve(images.size());
    for (const auto& im : images) a.push_back(im.angle_deg);
    return a;
}

}  // namespace diffnaf
