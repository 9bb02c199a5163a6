"""Numerical workbench for traced index theory on flat bundles over tori."""

from ncindex._errors import (
    DegenerateSpectrumError,
    RetractionUndefinedError,
    StructureError,
)
from ncindex.algebra import (
    AlgebraElement,
    AlgebraSpec,
    FiniteGroup,
    TraceFunctional,
    apply_trace,
    canonical_group_trace,
    center_valued_trace,
    cyclic_group,
    delocalized_trace,
    direct_product,
    group_algebra,
    group_from_label,
    matrix_algebra,
    normalized_trace,
    scalar_trace,
    spec_from_config,
    spectral_calculus,
)
from ncindex.bundle import (
    BundleSpec,
    ModuleForm,
    Monodromy,
    automorphy_bundle,
    complement,
    curvature,
    direct_sum,
    flat_bundle,
    gns_fiber,
    gns_twist,
    holonomies,
    line_bundle,
    projection_bundle,
    pullback_bundle,
    random_connection,
    random_section,
    resample_bundle,
    retract_projection,
    tensor_with_vector_bundle,
    trivialized_bundle,
)
from ncindex.chern import (
    ChernForm,
    ch_tau,
    closedness_residual,
    connection_independence_gap,
    integrated,
    topological_index,
)
from ncindex.cover import (
    CoverOperator,
    CoverSpec,
    DictionaryUnitary,
    cover_from_deck,
    cover_kernel_data,
    cyclic_cover,
    dictionary,
    l2_index,
    lift_operator,
    twisted_base_bundle,
)
from ncindex.forms import (
    Grid,
    MatrixForm,
    Twist,
    exterior_d,
    fourier_resample,
    integrate,
    pullback_form,
    random_band_limited,
    wedge,
)
from ncindex.gns import (
    GnsSpace,
    commutant,
    extend_map,
    extended_trace_of_projection,
    l2_free,
    l2_of_module,
    module_map_from_commutant,
)
from ncindex.hilbert_module import (
    K0Class,
    ModuleMap,
    ModuleVector,
    ProjectiveModule,
    class_of,
    dim_tau,
    fredholm_index,
    inner_product,
    polar_decomposition,
)
from ncindex.spectral import (
    IndexReport,
    KernelData,
    TwistedOperator,
    analytic_index,
    assemble_dolbeault,
    index_report,
    k_theory_index,
    kernel_data,
)

__version__ = "0.1.0"

__all__ = [
    "AlgebraElement",
    "AlgebraSpec",
    "BundleSpec",
    "ChernForm",
    "CoverOperator",
    "CoverSpec",
    "DegenerateSpectrumError",
    "DictionaryUnitary",
    "FiniteGroup",
    "GnsSpace",
    "Grid",
    "IndexReport",
    "K0Class",
    "KernelData",
    "MatrixForm",
    "ModuleForm",
    "ModuleMap",
    "ModuleVector",
    "Monodromy",
    "ProjectiveModule",
    "RetractionUndefinedError",
    "StructureError",
    "TraceFunctional",
    "Twist",
    "TwistedOperator",
    "analytic_index",
    "apply_trace",
    "assemble_dolbeault",
    "automorphy_bundle",
    "canonical_group_trace",
    "center_valued_trace",
    "ch_tau",
    "class_of",
    "closedness_residual",
    "commutant",
    "complement",
    "connection_independence_gap",
    "cover_from_deck",
    "cover_kernel_data",
    "curvature",
    "cyclic_cover",
    "cyclic_group",
    "delocalized_trace",
    "dictionary",
    "dim_tau",
    "direct_product",
    "direct_sum",
    "extend_map",
    "extended_trace_of_projection",
    "exterior_d",
    "flat_bundle",
    "fourier_resample",
    "fredholm_index",
    "gns_fiber",
    "gns_twist",
    "group_algebra",
    "group_from_label",
    "holonomies",
    "index_report",
    "inner_product",
    "integrate",
    "integrated",
    "k_theory_index",
    "kernel_data",
    "l2_free",
    "l2_index",
    "l2_of_module",
    "lift_operator",
    "line_bundle",
    "matrix_algebra",
    "module_map_from_commutant",
    "normalized_trace",
    "polar_decomposition",
    "projection_bundle",
    "pullback_bundle",
    "pullback_form",
    "random_band_limited",
    "random_connection",
    "random_section",
    "resample_bundle",
    "retract_projection",
    "scalar_trace",
    "spec_from_config",
    "spectral_calculus",
    "tensor_with_vector_bundle",
    "topological_index",
    "trivialized_bundle",
    "twisted_base_bundle",
    "__version__",
]
