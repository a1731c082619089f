"""High-dimensional empirical likelihood inference with general estimating equations."""
__version__ = "0.1.0"

from .el_core import chi2_quantile, el_ratio, marginal_el_ratio, normal_quantile, solve_lambda
from .moments import (
    Dataset,
    TruthSpec,
    gen_linear,
    gen_overid_mean,
    gen_repeated,
    make_iv_model,
    make_linear_model,
    make_mean_overid_model,
    make_qif_model,
)
from .penalized import PenaltySpec, bias_correct, ebic_select, fit_penalized_el, inner_penalized_dual
from .projection import build_projection, estimate_gradient, solve_projection_row
from .confidence import build_projected_el, confidence_interval, region_contains, region_spec
from .overid import build_w_hat, critical_value, run_overid_test, select_J, test_statistic
