"""Model and training configuration.

ModelConfig pins every architectural knob; TrainConfig pins the optimizer
schedule.  Both round-trip through plain dicts so they can live inside
JSON run configs and checkpoint headers.

The spatial-attention toggles deserve a note: use_mha controls whether the
concept attention has 3 heads or 1, and use_msa controls whether those
heads smooth their scores at distinct window sizes.  Parameters are
allocated from the *effective* head/scale structure, so configurations
that collapse to the same architecture produce bit-identical runs.
"""

from dataclasses import asdict, dataclass, fields


@dataclass
class ModelConfig:
    image_size: tuple = (64, 64)        # (height, width) pixels
    channels: int = 3
    patch_size: int = 16
    d_model: int = 64
    n_blocks: int = 2
    n_attn_heads: int = 4
    mlp_hidden: int = 128
    pos_embed: bool = True
    n_concepts: int = 8
    concept_embed_size: int = 16        # 16 classification, 32 regression
    msa_heads: int = 3
    msa_scales: tuple = (1, 2, 3)       # smoothing window per attention head
    use_msa: bool = True
    use_mha: bool = True
    use_cacm: bool = True
    use_cml: bool = True
    cacm_hidden: int = 16
    dropout: float = 0.01
    lambda_concept: float = 1.0
    lambda_map: float = 1.0
    rho: float = 0.5                    # probability threshold for the weighted map
    task: str = "classification"
    n_classes: int = 4

    def validate(self):
        h, w = self.image_size
        if h <= 0 or w <= 0 or h % self.patch_size or w % self.patch_size:
            raise ValueError(f"image size {self.image_size} not divisible by patch {self.patch_size}")
        if self.channels <= 0:
            raise ValueError("channels must be positive")
        if self.d_model % self.n_attn_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.n_attn_heads} heads")
        if self.n_concepts < 1 or self.concept_embed_size < 1:
            raise ValueError("need at least one concept and a positive embedding size")
        if self.msa_heads < 1:
            raise ValueError("msa_heads must be >= 1")
        if len(self.msa_scales) != self.msa_heads:
            raise ValueError(f"msa_scales {self.msa_scales} must list one window per head")
        if any(int(s) < 1 for s in self.msa_scales):
            raise ValueError("msa scale windows must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.lambda_concept < 0 or self.lambda_map < 0:
            raise ValueError("loss weights must be nonnegative")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must be in [0, 1], got {self.rho}")
        if self.task not in ("classification", "regression"):
            raise ValueError(f"task must be classification or regression, got {self.task!r}")
        if self.task == "classification" and self.n_classes < 2:
            raise ValueError("classification needs at least 2 classes")
        if self.cacm_hidden < 1:
            raise ValueError("cacm_hidden must be positive")
        return self

    # effective attention structure: 1 head at window 1 unless the
    # multi-head toggle is on; distinct windows only with both toggles on
    def effective_heads(self):
        return self.msa_heads if self.use_mha else 1

    def effective_scales(self):
        if self.use_mha and self.use_msa:
            return tuple(int(s) for s in self.msa_scales)
        return (1,) * self.effective_heads()

    def num_patches(self):
        h, w = self.image_size
        return (h // self.patch_size, w // self.patch_size)

    def n_tokens(self):
        hp, wp = self.num_patches()
        return hp * wp

    def task_width(self):
        return self.n_classes if self.task == "classification" else 1

    def to_dict(self):
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        d["msa_scales"] = list(self.msa_scales)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown model config keys: {sorted(extra)}")
        kw = dict(d)
        if "image_size" in kw:
            kw["image_size"] = tuple(int(v) for v in kw["image_size"])
        if "msa_scales" in kw:
            kw["msa_scales"] = tuple(int(v) for v in kw["msa_scales"])
        return cls(**kw).validate()


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 100
    patience: int = 10                  # early stop on validation task loss
    batch_size: int = 32
    val_fraction: float = 0.1
    augment: bool = False

    def validate(self):
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("adam betas must lie in (0, 1)")
        if self.max_epochs < 1 or self.patience < 1 or self.batch_size < 1:
            raise ValueError("epochs, patience and batch size must be positive")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown train config keys: {sorted(extra)}")
        return cls(**d).validate()
