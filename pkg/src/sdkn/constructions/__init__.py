"""Explicit SDKN weights for polynomial building blocks."""

from .modules import (
    DEFAULT_KERNEL,
    DEFAULT_SIGMA,
    CenterTriple,
    DegenerateTermWarning,
    ModuleBlueprint,
    ModuleKind,
    PolynomialSpec,
    PolynomialSpecError,
    adjust_depth,
    build_addition_module,
    build_bivariate_monomial,
    build_identity_or_squaring,
    build_module,
    build_product_module,
    build_univariate_monomial,
    compile_polynomial,
    grid,
    parse_polynomial_spec,
    propagated_center_margins,
    refine_sigma,
    sup_error,
)
from .program import MARGIN, CenterCollapseError, Fragment, margin
from .width import EvenProfileFit, decompose_symmetric, fit_even_profile, symmetric_parts

__all__ = [
    "DEFAULT_KERNEL",
    "DEFAULT_SIGMA",
    "CenterTriple",
    "DegenerateTermWarning",
    "ModuleBlueprint",
    "ModuleKind",
    "PolynomialSpec",
    "PolynomialSpecError",
    "adjust_depth",
    "build_addition_module",
    "build_bivariate_monomial",
    "build_identity_or_squaring",
    "build_module",
    "build_product_module",
    "build_univariate_monomial",
    "compile_polynomial",
    "grid",
    "parse_polynomial_spec",
    "propagated_center_margins",
    "refine_sigma",
    "sup_error",
    "MARGIN",
    "CenterCollapseError",
    "Fragment",
    "margin",
    "EvenProfileFit",
    "decompose_symmetric",
    "fit_even_profile",
    "symmetric_parts",
]
