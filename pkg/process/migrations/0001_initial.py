from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = []

    operations = [
        migrations.CreateModel(
            name='Process',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True,
                                           serialize=False, verbose_name='ID')),
                ('name', models.CharField(max_length=256)),
                ('pid', models.IntegerField(default=0)),
                ('exited', models.BooleanField(default=False)),
                ('exitcode', models.IntegerField(default=0)),
                ('statustext', models.CharField(default='', max_length=256)),
                ('percentdone', models.IntegerField(default=0)),
                ('updated', models.DateTimeField(auto_now=True)),
            ],
            options={
                'ordering': ['name'],
            },
        ),
    ]
