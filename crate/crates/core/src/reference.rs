//! Reference network configurations.
//!
//! The VGG-like family stacks two conv-relu pairs before each of the first two
//! pools and one pair before the third, thirteen layers in all (counting conv,
//! relu and pool layers). The split sits right after those thirteen layers.
//! All convolutions are 3x3, stride 1, unpadded.

use crate::network::{LayerSpec, NetworkSpec};
use crate::nn::ConvSpec;
use crate::planner::Grid;

/// Number of layers in the VGG-like streaming section.
pub const VGG_SPLIT: usize = 13;

fn conv3(c_in: usize, c_out: usize) -> LayerSpec {
    LayerSpec::Conv(ConvSpec {
        k: 3,
        s: 1,
        p: 0,
        c_in,
        c_out,
    })
}

fn pool2() -> LayerSpec {
    LayerSpec::MaxPool { k: 2, s: 2 }
}

/// Thirteen-layer streaming section with channel widths `[a, b, c]` per block.
fn vgg_streaming(input_channels: usize, [a, b, c]: [usize; 3]) -> Vec<LayerSpec> {
    use LayerSpec::Relu;
    vec![
        conv3(input_channels, a),
        Relu,
        conv3(a, a),
        Relu,
        pool2(),
        conv3(a, b),
        Relu,
        conv3(b, b),
        Relu,
        pool2(),
        conv3(b, c),
        Relu,
        pool2(),
    ]
}

/// Desk-scale VGG-like net: streaming section plus a dense head.
pub fn vgg13_desk(input_channels: usize) -> NetworkSpec {
    let mut layers = vgg_streaming(input_channels, [4, 8, 8]);
    layers.extend([
        LayerSpec::Flatten,
        LayerSpec::Dense { width: 8 },
        LayerSpec::Relu,
        LayerSpec::Dense { width: 1 },
    ]);
    NetworkSpec {
        input_channels,
        layers,
        split_index: VGG_SPLIT,
    }
}

/// Image side and grid used with [`vgg13_desk`] for lockstep comparisons.
pub const VGG13_DESK_IMAGE: usize = 130;
pub const VGG13_DESK_GRID: Grid = Grid::new(2, 2);

/// Image side of the four-tile configuration.
pub const VGG13_FOUR_TILE_IMAGE: usize = 514;

/// Architecture used for the 64-megapixel memory estimates (8130x8130 RGB).
///
/// | maps   | layers                   | output          |
/// |--------|--------------------------|-----------------|
/// | 0-4    | conv16 relu conv16 relu pool | 16 x 4063^2 |
/// | 5-9    | conv32 relu conv32 relu pool | 32 x 2029^2 |
/// | 10-12  | conv64 relu pool         | 64 x 1013^2     |
/// | head   | conv64 relu pool conv64 relu pool flatten dense1 | 1 |
pub fn vgg13_64mp() -> NetworkSpec {
    let mut layers = vgg_streaming(3, [16, 32, 64]);
    layers.extend([
        conv3(64, 64),
        LayerSpec::Relu,
        pool2(),
        conv3(64, 64),
        LayerSpec::Relu,
        pool2(),
        LayerSpec::Flatten,
        LayerSpec::Dense { width: 1 },
    ]);
    NetworkSpec {
        input_channels: 3,
        layers,
        split_index: VGG_SPLIT,
    }
}

pub const VGG13_64MP_IMAGE: usize = 8130;
pub const VGG13_64MP_GRID: Grid = Grid::new(8, 8);
pub const VGG13_64MP_BATCH: usize = 8;

/// Small net for the synthetic two-blob task on 256x256 images.
///
/// A 4x4 stride-4 conv followed by a padded 3x3 conv and two pools streams the
/// image down to an 8x16x16 map; a dense head compares the two halves.
pub fn global_task(input_channels: usize) -> NetworkSpec {
    NetworkSpec {
        input_channels,
        layers: vec![
            LayerSpec::Conv(ConvSpec {
                k: 4,
                s: 4,
                p: 0,
                c_in: input_channels,
                c_out: 4,
            }),
            LayerSpec::Relu,
            pool2(),
            LayerSpec::Conv(ConvSpec {
                k: 3,
                s: 1,
                p: 1,
                c_in: 4,
                c_out: 8,
            }),
            LayerSpec::Relu,
            pool2(),
            LayerSpec::Flatten,
            LayerSpec::Dense { width: 16 },
            LayerSpec::Relu,
            LayerSpec::Dense { width: 1 },
        ],
        split_index: 6,
    }
}

pub const GLOBAL_TASK_IMAGE: usize = 256;
pub const GLOBAL_TASK_GRID: Grid = Grid::new(4, 4);

/// Looks up a preset by name.
pub fn by_name(name: &str, input_channels: usize) -> Option<NetworkSpec> {
    match name {
        "vgg13_desk" => Some(vgg13_desk(input_channels)),
        "vgg13_64mp" => Some(vgg13_64mp()),
        "global_task" => Some(global_task(input_channels)),
        _ => None,
    }
}

pub const PRESETS: [&str; 3] = ["vgg13_desk", "vgg13_64mp", "global_task"];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::build_tile_plan;
    use crate::tensor::Dims;

    #[test]
    fn presets_validate() {
        let desk = vgg13_desk(1);
        assert_eq!(desk.split_dims(VGG13_DESK_IMAGE).unwrap(), Dims::new(1, 8, 13, 13));
        assert_eq!(desk.split_dims(VGG13_FOUR_TILE_IMAGE).unwrap(), Dims::new(1, 8, 61, 61));
        assert_eq!(
            vgg13_64mp().split_dims(VGG13_64MP_IMAGE).unwrap(),
            Dims::new(1, 64, 1013, 1013)
        );
        assert_eq!(
            global_task(1).split_dims(GLOBAL_TASK_IMAGE).unwrap(),
            Dims::new(1, 8, 16, 16)
        );
        for name in PRESETS {
            assert!(by_name(name, 1).is_some());
        }
        assert!(by_name("resnet", 1).is_none());
    }

    #[test]
    fn reference_plans_build() {
        let p = build_tile_plan(&vgg13_desk(1), VGG13_FOUR_TILE_IMAGE, Grid::new(2, 2)).unwrap();
        assert_eq!(p.tiles.len(), 4);
        let p = build_tile_plan(&vgg13_64mp(), VGG13_64MP_IMAGE, VGG13_64MP_GRID).unwrap();
        assert_eq!(p.tiles.len(), 64);
        build_tile_plan(&global_task(1), GLOBAL_TASK_IMAGE, GLOBAL_TASK_GRID).unwrap();
    }
}
