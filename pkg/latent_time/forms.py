"""
Experiment-config validation.

Each JSON section is bound to one Django form; the fields of these forms are
the published config schema (`manage.py run_experiment schema`).
"""
from django import forms

from latent_time.exceptions import ConfigError

VARIANT_CHOICES = [(v, v) for v in ("node", "uni_node", "lt_node", "alt_node")]


def _number_list(value, field: str, length: int | None = None, positive_ints: bool = False) -> list:
    if value is None:
        return None
    if not isinstance(value, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
        raise forms.ValidationError(f"{field} must be a list of numbers")
    if length is not None and len(value) != length:
        raise forms.ValidationError(f"{field} must have exactly {length} entries")
    if positive_ints and (not value or any(int(v) != v or v < 1 for v in value)):
        raise forms.ValidationError(f"{field} must be a nonempty list of positive integers")
    return [int(v) for v in value] if positive_ints else [float(v) for v in value]


class RunForm(forms.Form):
    seed = forms.IntegerField(min_value=0, initial=0)
    output_dir = forms.CharField(initial="runs/default")


class ModelSpecForm(forms.Form):
    variant = forms.ChoiceField(choices=VARIANT_CHOICES, initial="lt_node")
    preset = forms.ChoiceField(
        choices=[("regression", "regression"), ("classifier", "classifier"), ("custom", "custom")],
        initial="regression",
    )
    task = forms.ChoiceField(
        choices=[("regression", "regression"), ("classification", "classification")], required=False
    )
    input_dim = forms.IntegerField(min_value=1, required=False)
    num_classes = forms.IntegerField(min_value=2, required=False)
    input_block = forms.JSONField(required=False)
    node_block = forms.JSONField(required=False)
    head = forms.JSONField(required=False)
    inference_block = forms.JSONField(required=False)
    activation = forms.ChoiceField(choices=[("tanh", "tanh"), ("relu", "relu")], required=False)
    end_time = forms.FloatField(min_value=0.0, initial=1.0)
    uniform_a = forms.FloatField(min_value=0.0, initial=0.0)
    uniform_b = forms.FloatField(initial=3.0)
    posterior_alpha = forms.FloatField(initial=2.0)
    posterior_beta = forms.FloatField(initial=0.5)

    def clean_input_block(self):
        return _number_list(self.cleaned_data.get("input_block"), "input_block", positive_ints=True)

    def clean_node_block(self):
        return _number_list(self.cleaned_data.get("node_block"), "node_block", positive_ints=True)

    def clean_head(self):
        return _number_list(self.cleaned_data.get("head"), "head", positive_ints=True)

    def clean_inference_block(self):
        return _number_list(self.cleaned_data.get("inference_block"), "inference_block", positive_ints=True)

    def clean_posterior_alpha(self):
        value = self.cleaned_data["posterior_alpha"]
        if value <= 0:
            raise forms.ValidationError("must be positive")
        return value

    def clean_posterior_beta(self):
        value = self.cleaned_data["posterior_beta"]
        if value <= 0:
            raise forms.ValidationError("must be positive")
        return value

    def clean(self):
        cleaned = super().clean()
        a, b = cleaned.get("uniform_a"), cleaned.get("uniform_b")
        if a is not None and b is not None and not a < b:
            self.add_error("uniform_b", "must exceed uniform_a")
        if cleaned.get("preset") == "custom":
            for name in ("input_dim", "input_block", "node_block", "head", "task"):
                if not cleaned.get(name):
                    self.add_error(name, "required when preset is custom")
        return cleaned


class DatasetForm(forms.Form):
    generator = forms.ChoiceField(
        choices=[("foong1d", "foong1d"), ("two_moons", "two_moons"), ("csv", "csv")], initial="foong1d"
    )
    n = forms.IntegerField(min_value=2, required=False)
    noise_std = forms.FloatField(min_value=0.0, required=False)
    test_fraction = forms.FloatField(min_value=0.0, max_value=0.9, required=False)
    csv_path = forms.CharField(required=False)
    num_classes = forms.IntegerField(min_value=2, required=False)
    ood_shift = forms.JSONField(required=False)
    ood_scale = forms.FloatField(min_value=0.0, initial=0.25)
    ood_n = forms.IntegerField(min_value=0, initial=200)

    def clean_ood_shift(self):
        return _number_list(self.cleaned_data.get("ood_shift"), "ood_shift")

    def clean(self):
        cleaned = super().clean()
        if cleaned.get("generator") == "csv" and not cleaned.get("csv_path"):
            self.add_error("csv_path", "required when generator is csv")
        return cleaned


class SolverForm(forms.Form):
    atol = forms.FloatField(initial=1e-2)
    rtol = forms.FloatField(initial=1e-2)
    initial_step = forms.FloatField(required=False)
    max_steps = forms.IntegerField(min_value=1, initial=10_000)
    safety = forms.FloatField(initial=0.9)
    min_scale = forms.FloatField(initial=0.2)
    max_scale = forms.FloatField(initial=10.0)

    def clean(self):
        cleaned = super().clean()
        for name in ("atol", "rtol"):
            if cleaned.get(name) is not None and cleaned[name] <= 0:
                self.add_error(name, "must be positive")
        safety = cleaned.get("safety")
        if safety is not None and not 0.0 < safety < 1.0:
            self.add_error("safety", "must lie in (0, 1)")
        lo, hi = cleaned.get("min_scale"), cleaned.get("max_scale")
        if lo is not None and hi is not None and not lo < 1.0 < hi:
            self.add_error("max_scale", "need min_scale < 1 < max_scale")
        step = cleaned.get("initial_step")
        if step is not None and step <= 0:
            self.add_error("initial_step", "must be positive")
        return cleaned


class TrainingForm(forms.Form):
    prior_alpha = forms.FloatField(initial=2.0)
    prior_beta = forms.FloatField(initial=0.5)
    grid_a = forms.FloatField(min_value=0.0, initial=0.0)
    grid_b = forms.FloatField(initial=3.0)
    samples = forms.IntegerField(min_value=1, initial=10)
    iterations = forms.IntegerField(min_value=0, initial=3000)
    batch_size = forms.IntegerField(min_value=1, required=False)
    kl_weight = forms.FloatField(min_value=0.0, initial=1.0)
    learning_rate = forms.FloatField(min_value=0.0, initial=1e-3)
    momentum = forms.FloatField(min_value=0.0, max_value=0.999999, initial=0.9)
    weight_decay = forms.FloatField(min_value=0.0, initial=1e-4)
    variational_learning_rate = forms.FloatField(min_value=0.0, initial=1e-3)
    variational_weight_decay = forms.FloatField(min_value=0.0, initial=0.0)
    inference_learning_rate = forms.FloatField(min_value=0.0, initial=1e-3)
    inference_weight_decay = forms.FloatField(min_value=0.0, initial=5e-4)
    milestones = forms.JSONField(required=False, initial=[[1000, 10.0], [2000, 10.0]])

    def clean_milestones(self):
        value = self.cleaned_data.get("milestones")
        if value is None:
            return []
        if not isinstance(value, list):
            raise forms.ValidationError("milestones must be a list of [iteration, factor] pairs")
        pairs = []
        for item in value:
            pair = _number_list(item, "milestone", length=2)
            if pair[0] < 0 or int(pair[0]) != pair[0] or pair[1] <= 0:
                raise forms.ValidationError("each milestone needs an integer iteration >= 0 and a positive factor")
            pairs.append((int(pair[0]), pair[1]))
        return pairs

    def clean(self):
        cleaned = super().clean()
        for name in ("prior_alpha", "prior_beta"):
            if cleaned.get(name) is not None and cleaned[name] <= 0:
                self.add_error(name, "must be positive")
        a, b = cleaned.get("grid_a"), cleaned.get("grid_b")
        if a is not None and b is not None and not a < b:
            self.add_error("grid_b", "must exceed grid_a")
        return cleaned


class EvaluationForm(forms.Form):
    samples = forms.IntegerField(min_value=1, initial=10)
    num_bins = forms.IntegerField(min_value=1, initial=10)
    batch_size = forms.IntegerField(min_value=1, initial=256)
    rejection_fractions = forms.JSONField(required=False, initial=[0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])
    confidence_thresholds = forms.JSONField(
        required=False, initial=[0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]
    )
    rotation_angles = forms.JSONField(required=False, initial=[])
    rotation_tau = forms.FloatField(min_value=0.0, max_value=1.0, initial=0.9)
    ood_interval = forms.JSONField(required=False, initial=[-0.5, 0.5])
    grid_lo = forms.FloatField(initial=-2.0)
    grid_hi = forms.FloatField(initial=2.0)
    grid_points = forms.IntegerField(min_value=2, initial=401)

    def clean_rejection_fractions(self):
        values = _number_list(self.cleaned_data.get("rejection_fractions"), "rejection_fractions") or []
        if any(not 0.0 <= v < 1.0 for v in values):
            raise forms.ValidationError("rejection fractions must lie in [0, 1)")
        return values

    def clean_confidence_thresholds(self):
        values = _number_list(self.cleaned_data.get("confidence_thresholds"), "confidence_thresholds") or []
        if values != sorted(values) or any(not 0.0 <= v <= 1.0 for v in values):
            raise forms.ValidationError("thresholds must be ascending values in [0, 1]")
        return values

    def clean_rotation_angles(self):
        return _number_list(self.cleaned_data.get("rotation_angles"), "rotation_angles") or []

    def clean_ood_interval(self):
        values = _number_list(self.cleaned_data.get("ood_interval"), "ood_interval", length=2)
        if values is None:
            return [-0.5, 0.5]
        if not values[0] < values[1]:
            raise forms.ValidationError("interval needs lo < hi")
        return values


class AttackForm(forms.Form):
    epsilons = forms.JSONField(required=False, initial=[0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3])
    clip_lo = forms.FloatField(required=False)
    clip_hi = forms.FloatField(required=False)
    samples = forms.IntegerField(min_value=1, initial=10)
    max_examples = forms.IntegerField(min_value=1, initial=200)

    def clean_epsilons(self):
        values = _number_list(self.cleaned_data.get("epsilons"), "epsilons")
        if not values:
            raise forms.ValidationError("at least one epsilon is required")
        if any(v < 0 for v in values) or values != sorted(values):
            raise forms.ValidationError("epsilons must be nonnegative and ascending")
        return values

    def clean(self):
        cleaned = super().clean()
        lo, hi = cleaned.get("clip_lo"), cleaned.get("clip_hi")
        if (lo is None) != (hi is None):
            self.add_error("clip_hi", "clip_lo and clip_hi must be given together")
        elif lo is not None and not lo < hi:
            self.add_error("clip_hi", "must exceed clip_lo")
        return cleaned


class PosteriorReportForm(forms.Form):
    t_max = forms.FloatField(initial=6.0)
    points = forms.IntegerField(min_value=2, initial=601)

    def clean_t_max(self):
        value = self.cleaned_data["t_max"]
        if value <= 0:
            raise forms.ValidationError("must be positive")
        return value


SECTION_FORMS = {
    "model": ModelSpecForm,
    "dataset": DatasetForm,
    "solver": SolverForm,
    "training": TrainingForm,
    "evaluation": EvaluationForm,
    "attack": AttackForm,
    "posterior_report": PosteriorReportForm,
}


def validate_section(path: str, form_class: type[forms.Form], data) -> dict:
    """Bind `data` to `form_class`, filling declared initials; raise ConfigError on the first problem."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(path or "config", "must be a JSON object")
    for key in data:
        if key not in form_class.base_fields:
            raise ConfigError(f"{path}.{key}" if path else key, "unknown field")
    bound = {
        name: field.initial for name, field in form_class.base_fields.items() if field.initial is not None
    }
    bound.update({k: v for k, v in data.items() if v is not None})
    form = form_class(data=bound)
    if not form.is_valid():
        field, errors = next(iter(form.errors.items()))
        where = path if field == "__all__" else (f"{path}.{field}" if path else field)
        raise ConfigError(where or "config", str(errors[0]))
    return form.cleaned_data


def schema() -> dict:
    """Field table of every section form."""
    def describe(form_class):
        table = {}
        for name, field in form_class.base_fields.items():
            entry = {"type": type(field).__name__.replace("Field", "").lower(), "required": field.required}
            if field.initial is not None:
                entry["default"] = field.initial
            if getattr(field, "choices", None):
                entry["choices"] = [value for value, _ in field.choices if value != ""]
            for bound in ("min_value", "max_value"):
                if getattr(field, bound, None) is not None:
                    entry[bound] = getattr(field, bound)
            table[name] = entry
        return table

    result = {"seed": describe(RunForm)["seed"], "output_dir": describe(RunForm)["output_dir"]}
    result.update({section: describe(form_class) for section, form_class in SECTION_FORMS.items()})
    return result
