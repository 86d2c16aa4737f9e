//! Small hand-built instances with known assembly behavior, shared by tests,
//! benchmarks and the CLI demo.

use crate::world::{Instance, VOXELS};

/// Builds an instance from three layers (z = 0, 1, 2), each three rows
/// (y = 0, 1, 2) of three part-id digits (x = 0, 1, 2).
///
/// Panics on malformed input; fixtures are compile-time constants.
pub fn from_layers(layers: [[&str; 3]; 3]) -> Instance {
    let mut owner = [0usize; VOXELS];
    for (z, layer) in layers.iter().enumerate() {
        for (y, row) in layer.iter().enumerate() {
            assert_eq!(row.len(), 3, "row {row:?} must have three cells");
            for (x, ch) in row.chars().enumerate() {
                let id = ch.to_digit(10).expect("part ids are single digits") as usize;
                owner[x + 3 * y + 9 * z] = id;
            }
        }
    }
    Instance::from_owner_table(&owner).expect("fixture is a valid instance")
}

/// Three horizontal slabs stacked bottom (0) to top (2).
pub fn slab_tower() -> Instance {
    from_layers([
        ["000", "000", "000"],
        ["111", "111", "111"],
        ["222", "222", "222"],
    ])
}

/// Nine three-cube bars in three crossed layers: 0..3 run along x on the floor,
/// 3..6 along y in the middle, 6..9 along x on top.
pub fn crossed_bars() -> Instance {
    from_layers([
        ["000", "111", "222"],
        ["345", "345", "345"],
        ["666", "777", "888"],
    ])
}

/// Part 1 is an L-tromino in the middle layer. Once the floor piece 0, the wall 2
/// and the lid 3 are placed it is locked in every direction.
pub fn enclosed_part() -> Instance {
    from_layers([
        ["000", "000", "000"],
        ["012", "112", "222"],
        ["333", "333", "333"],
    ])
}

/// Ids of the floor, trapped, wall and lid parts of [`enclosed_part`].
pub const ENCLOSED_FLOOR: usize = 0;
pub const ENCLOSED_TRAPPED: usize = 1;
pub const ENCLOSED_WALL: usize = 2;
pub const ENCLOSED_LID: usize = 3;

/// M=4 layout with exactly one feasible assembly order under the default oracle.
pub fn single_order() -> Instance {
    from_layers([
        ["112", "122", "111"],
        ["213", "223", "333"],
        ["200", "000", "003"],
    ])
}

/// M=4 layout where placing parts by ascending center of mass fails at the third
/// step although feasible orders exist.
pub fn heuristic_trap() -> Instance {
    from_layers([
        ["300", "322", "312"],
        ["330", "132", "112"],
        ["300", "102", "112"],
    ])
}
