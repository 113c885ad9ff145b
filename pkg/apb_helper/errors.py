class ConfigError(ValueError):
    pass


class ContractViolation(RuntimeError):
    pass


class EmptyAttentionRow(ContractViolation):
    def __init__(self, rows):
        self.rows = list(rows)
        super().__init__(f'empty attention row: query rows {self.rows[:8]} see no unmasked key')


class DeadlockError(ContractViolation):
    def __init__(self, round_index, waiting, finished, kind=None):
        self.round_index = round_index
        self.waiting = list(waiting)
        self.finished = list(finished)
        super().__init__(
            f'deadlock at round {round_index}: hosts {self.waiting} wait on {kind} '
            f'but hosts {self.finished} already left the group'
        )


class ScorerWeightsUnavailable(ContractViolation):
    def __init__(self, layer):
        self.layer = layer
        super().__init__(f'scorer weights unavailable for layer {layer}')
