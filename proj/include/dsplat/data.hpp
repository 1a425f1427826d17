#pragma once

#include "dsplat/raster.hpp"

#include <optional>
#include <string>

namespace dsplat {

// One posed view: ground-truth image, optional reference depth maps. The
// mono map is the (scale/shift-ambiguous) supervision signal; the gt map is
// used for evaluation only.
struct View {
    std::string name;
    Camera camera;
    ImageBuffer image;
    std::optional<DepthMap> depth_mono;
    std::optional<DepthMap> depth_gt;
};

struct Dataset {
    std::vector<View> train;
    std::vector<View> test;
    Aabb bbox;
};

}  // namespace dsplat
