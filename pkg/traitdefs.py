#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
Trait types shared by the configuration and state classes. All of them
reject NaN and infinities on top of their range checks.
"""

import math

from traits.api import BaseFloat, BaseInt


class FiniteFloat(BaseFloat):
    info_text = "a finite float"

    def validate(self, obj, name, value):
        value = super(FiniteFloat, self).validate(obj, name, value)
        if not math.isfinite(value):
            self.error(obj, name, value)
        return value


class PositiveFloat(FiniteFloat):
    info_text = "a finite float > 0"

    def validate(self, obj, name, value):
        value = super(PositiveFloat, self).validate(obj, name, value)
        if value <= 0.0:
            self.error(obj, name, value)
        return value


class NonNegativeFloat(FiniteFloat):
    info_text = "a finite float >= 0"

    def validate(self, obj, name, value):
        value = super(NonNegativeFloat, self).validate(obj, name, value)
        if value < 0.0:
            self.error(obj, name, value)
        return value


class PositiveInt(BaseInt):
    info_text = "an integer >= 1"

    def validate(self, obj, name, value):
        value = super(PositiveInt, self).validate(obj, name, value)
        if value < 1:
            self.error(obj, name, value)
        return value


class NonNegativeInt(BaseInt):
    info_text = "an integer >= 0"

    def validate(self, obj, name, value):
        value = super(NonNegativeInt, self).validate(obj, name, value)
        if value < 0:
            self.error(obj, name, value)
        return value
