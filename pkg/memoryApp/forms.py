from django import forms
from django.core.exceptions import ValidationError

from .models import Message, Role


# Request bodies of the JSON API, validated in views.py
class MessageForm(forms.Form):
    role = forms.ChoiceField(choices=Role.choices)
    content = forms.CharField(strip=False)
    timestamp = forms.CharField()

    def clean_content(self):
        content = self.cleaned_data["content"]
        if not content.strip():
            raise ValidationError("Message content is empty")
        return content

    def to_message(self):
        return Message.create(
            self.cleaned_data["role"], self.cleaned_data["content"], self.cleaned_data["timestamp"]
        )


class SearchForm(forms.Form):
    query = forms.CharField()
    k = forms.IntegerField(required=False, min_value=1)


class AnswerForm(forms.Form):
    question = forms.CharField()
    k = forms.IntegerField(required=False, min_value=1)


class DrainForm(forms.Form):
    user_id = forms.CharField(required=False)
    timeout = forms.FloatField(required=False, min_value=0)


class PageForm(forms.Form):
    page = forms.IntegerField(required=False, min_value=1)
    page_size = forms.IntegerField(required=False, min_value=1, max_value=500)
