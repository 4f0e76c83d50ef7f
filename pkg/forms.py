from wtforms import BooleanField, FloatField, Form, IntegerField, StringField
from wtforms.validators import AnyOf, NumberRange, ValidationError

from tensor import ConfigurationError


class ConfigValidationError(ConfigurationError):
    def __init__(self, errors):
        self.errors = errors
        details = '; '.join(f'{name}: {", ".join(messages)}' for name, messages in sorted(errors.items()))
        super().__init__(f'invalid run configuration: {details}')


class OptionalNumberRange(NumberRange):
    """NumberRange that accepts a missing value (None)."""

    def __call__(self, form, field):
        if field.data is None:
            return
        super().__call__(form, field)


class RunConfigForm(Form):
    dataset = StringField('Dataset')
    ratio = FloatField('Supervision ratio', validators=[NumberRange(min=0.0, max=1.0)])
    seed = IntegerField('Seed', validators=[NumberRange(min=0)])
    epochs = IntegerField('Epochs', validators=[NumberRange(min=1)])
    lr = FloatField('Learning rate', validators=[NumberRange(min=0.0)])
    pool = IntegerField('Pool size', validators=[OptionalNumberRange(min=1)])
    embed_dim = IntegerField('Embedding dimension', validators=[NumberRange(min=1)])
    gru_dim = IntegerField('GRU width', validators=[NumberRange(min=1)])
    conv_filters = IntegerField('Convolution filters', validators=[NumberRange(min=1)])
    window = IntegerField('Convolution window', validators=[NumberRange(min=1)])
    smb_window = IntegerField('SMB window', validators=[NumberRange(min=1)])
    lam = FloatField('Lambda', validators=[NumberRange(min=0.0)])
    normalize = BooleanField('Normalize')
    use_smb = BooleanField('Use SMB')
    batch_size = IntegerField('Batch size', validators=[NumberRange(min=0)])
    min_score = FloatField('Minimum propagation score', validators=[OptionalNumberRange(min=0.0, max=1.0)])
    method = StringField('Classifier', validators=[AnyOf(['centroid', 'knn'])])
    k = IntegerField('Neighbours', validators=[NumberRange(min=1)])

    def validate_lr(self, field):
        if field.data is not None and field.data <= 0:
            raise ValidationError('Learning rate must be positive.')

    def validate_k(self, field):
        if field.data is not None and field.data % 2 == 0:
            raise ValidationError('k must be odd.')


def validate_run_config(values):
    """Validates merged settings; returns them with form-coerced types."""
    form = RunConfigForm(data=values)
    if not form.validate():
        raise ConfigValidationError(form.errors)
    cleaned = dict(values)
    for field in form:
        if field.name in values:
            cleaned[field.name] = field.data
    return cleaned
