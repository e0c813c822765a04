class ConfigError(ValueError):
    """Invalid experiment or dropout setting.

    ``field`` names the offending configuration key (dotted form, e.g.
    ``drop.p``) when one is known.
    """

    def __init__(self, message: str, field: str | None = None):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field
