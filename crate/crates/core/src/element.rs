//! Bilinear (Q1) reference element on a square cell. Local corner order is
//! lexicographic: (0,0), (1,0), (0,1), (1,1).

/// 2-point Gauss abscissae on [0, 1].
pub const GAUSS2: [f64; 2] = [0.5 - 0.288_675_134_594_812_9, 0.5 + 0.288_675_134_594_812_9];

/// Cell Gauss points (ξ, η) in lexicographic order, each with weight 1/4.
pub const CELL_GAUSS: [(f64, f64); 4] =
    [(GAUSS2[0], GAUSS2[0]), (GAUSS2[1], GAUSS2[0]), (GAUSS2[0], GAUSS2[1]), (GAUSS2[1], GAUSS2[1])];

#[inline]
pub fn shape(xi: f64, eta: f64) -> [f64; 4] {
    [(1.0 - xi) * (1.0 - eta), xi * (1.0 - eta), (1.0 - xi) * eta, xi * eta]
}

/// Gradients with respect to (ξ, η); divide by h for physical gradients.
#[inline]
pub fn grad_ref(xi: f64, eta: f64) -> [[f64; 2]; 4] {
    [[-(1.0 - eta), -(1.0 - xi)], [1.0 - eta, -xi], [-eta, 1.0 - xi], [eta, xi]]
}

/// `∫ ∇N_a · ∇N_b` over a square cell (independent of its size).
pub const STIFFNESS: [[f64; 4]; 4] = [
    [2.0 / 3.0, -1.0 / 6.0, -1.0 / 6.0, -1.0 / 3.0],
    [-1.0 / 6.0, 2.0 / 3.0, -1.0 / 3.0, -1.0 / 6.0],
    [-1.0 / 6.0, -1.0 / 3.0, 2.0 / 3.0, -1.0 / 6.0],
    [-1.0 / 3.0, -1.0 / 6.0, -1.0 / 6.0, 2.0 / 3.0],
];

/// `∫ N_a N_b` over a square cell of side `h`.
pub fn mass(h: f64) -> [[f64; 4]; 4] {
    let c = h * h / 36.0;
    [
        [4.0 * c, 2.0 * c, 2.0 * c, c],
        [2.0 * c, 4.0 * c, c, 2.0 * c],
        [2.0 * c, c, 4.0 * c, 2.0 * c],
        [c, 2.0 * c, 2.0 * c, 4.0 * c],
    ]
}
